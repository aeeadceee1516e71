//! Named parameter storage with checkpointing.
//!
//! Parameters live outside any tape as plain matrices; each training step
//! re-registers them as leaves on a fresh tape. The store assigns stable
//! integer ids in registration order, which the optimizer uses to pair
//! moment buffers with parameters.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::matrix::Matrix;
use crate::diffcore::tape::{Tape, Tensor};
use crate::error::{io_err, CareError, Result};

/// Stable handle to one parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter matrices.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            mats: Vec::new(),
        }
    }

    /// Register a parameter with explicit initial values. Names must be
    /// unique; they key the checkpoint format.
    pub fn register(&mut self, name: &str, m: Matrix) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(CareError::contract(
                "ParamStore::register",
                format!("duplicate parameter name '{name}'"),
            ));
        }
        self.names.push(name.to_string());
        self.mats.push(m);
        Ok(ParamId(self.mats.len() - 1))
    }

    /// Register a `rows x cols` parameter drawn uniformly from
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.register(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Iterate `(name, matrix)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.mats.iter())
    }

    /// Shapes in registration order (used to build optimizer state).
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.mats.iter().map(|m| m.shape()).collect()
    }

    /// Mutable view of all matrices, in registration order.
    pub fn mats_mut(&mut self) -> &mut [Matrix] {
        &mut self.mats
    }

    pub fn mats(&self) -> &[Matrix] {
        &self.mats
    }

    /// Register every parameter as a gradient-tracked leaf on `tape`, in id
    /// order, so `leafed[id.index()]` is the tensor for `id`.
    pub fn leaf_all(&self, tape: &mut Tape) -> Vec<Tensor> {
        self.mats.iter().map(|m| tape.param(m)).collect()
    }

    /// True when every parameter element is finite.
    pub fn all_finite(&self) -> bool {
        self.mats.iter().all(Matrix::all_finite)
    }

    /// Hash of all parameter bits, for cheap "nothing mutated" assertions.
    pub fn state_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, m) in self.iter() {
            name.hash(&mut h);
            m.rows().hash(&mut h);
            m.cols().hash(&mut h);
            for v in m.as_slice() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Write all parameters to a versioned JSON checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = WeightManifest {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            tensors: self
                .iter()
                .map(|(name, m)| WeightEntry {
                    name: name.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.as_slice().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&manifest)
            .map_err(|e| CareError::numeric(format!("checkpoint serialization failed: {e}")))?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    /// Load a checkpoint written by [`ParamStore::save`]. Rejects unknown
    /// format tags and versions with a clear message.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let manifest: WeightManifest = serde_json::from_str(&text).map_err(|e| CareError::Format {
            path: path.display().to_string(),
            line: e.line(),
            msg: format!("invalid weight checkpoint: {e}"),
        })?;
        if manifest.format != FORMAT_TAG {
            return Err(CareError::config(format!(
                "weight checkpoint {} has format tag '{}', expected '{}'",
                path.display(),
                manifest.format,
                FORMAT_TAG
            )));
        }
        if manifest.version != FORMAT_VERSION {
            return Err(CareError::config(format!(
                "weight checkpoint {} has version {}, this build reads version {}",
                path.display(),
                manifest.version,
                FORMAT_VERSION
            )));
        }
        let mut store = ParamStore::new();
        for entry in manifest.tensors {
            let m = Matrix::from_vec(entry.rows, entry.cols, entry.data).map_err(|_| {
                CareError::config(format!(
                    "weight checkpoint {}: tensor '{}' has a buffer that does not match its {}x{} shape",
                    path.display(),
                    entry.name,
                    entry.rows,
                    entry.cols
                ))
            })?;
            store.register(&entry.name, m)?;
        }
        Ok(store)
    }

    /// Copy values from another store with identical names and shapes
    /// (checkpoint restore into an already-built model).
    pub fn restore_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(CareError::config(
                "weight checkpoint does not match this model's parameter set".to_string(),
            ));
        }
        for (dst, src) in self.mats.iter_mut().zip(other.mats.iter()) {
            if dst.shape() != src.shape() {
                return Err(CareError::config(
                    "weight checkpoint tensor shape does not match the model".to_string(),
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

const FORMAT_TAG: &str = "care-weights";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightManifest {
    format: String,
    version: u32,
    tensors: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}
