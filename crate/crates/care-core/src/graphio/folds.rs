//! Deterministic 10-fold cross-validation splits.
//!
//! Indices are shuffled once with a seeded generator and cut into 10
//! contiguous chunks. Fold `k` tests on chunk `k`, validates on chunk
//! `(k + 1) % 10`, and trains on the remaining eight — an 8:1:1 split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};
use crate::graphio::Dataset;

/// Number of folds; fixed by the evaluation protocol.
pub const FOLD_COUNT: usize = 10;

/// Index sets for one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldIndices {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// All ten folds. Serializes as a JSON array of `{fold, train, val, test}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<FoldIndices>,
}

impl FoldPlan {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.folds)
            .map_err(|e| CareError::numeric(format!("fold plan serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let folds: Vec<FoldIndices> = serde_json::from_str(text)
            .map_err(|e| CareError::config(format!("invalid fold plan JSON: {e}")))?;
        Ok(FoldPlan { folds })
    }
}

/// Build the 10-fold plan for a dataset. With `stratified` set, indices are
/// first grouped by class and dealt round-robin into the chunks so each fold
/// approximates the global class balance; the default is a plain shuffle.
pub fn make_folds(dataset: &Dataset, seed: u64, stratified: bool) -> Result<FoldPlan> {
    make_folds_from_labels(&dataset.labels(), seed, stratified)
}

/// [`make_folds`] on bare labels (the dataset only contributes its length
/// and, for stratification, its classes).
pub fn make_folds_from_labels(labels: &[usize], seed: u64, stratified: bool) -> Result<FoldPlan> {
    let n = labels.len();
    if n < FOLD_COUNT {
        return Err(CareError::config(format!(
            "10-fold cross-validation needs at least {FOLD_COUNT} graphs, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Chunk boundaries: the first n % 10 chunks get one extra element.
    let base = n / FOLD_COUNT;
    let extra = n % FOLD_COUNT;
    let chunk_sizes: Vec<usize> = (0..FOLD_COUNT)
        .map(|k| base + usize::from(k < extra))
        .collect();

    let chunks: Vec<Vec<usize>> = if stratified {
        let class_count = labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut chunks: Vec<Vec<usize>> = vec![Vec::new(); FOLD_COUNT];
        let mut cursor = 0usize;
        for group in by_class.iter_mut() {
            group.shuffle(&mut rng);
            for &i in group.iter() {
                chunks[cursor % FOLD_COUNT].push(i);
                cursor += 1;
            }
        }
        chunks
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut chunks = Vec::with_capacity(FOLD_COUNT);
        let mut start = 0usize;
        for &size in &chunk_sizes {
            chunks.push(order[start..start + size].to_vec());
            start += size;
        }
        chunks
    };

    let folds = (0..FOLD_COUNT)
        .map(|k| {
            let val_chunk = (k + 1) % FOLD_COUNT;
            let mut train = Vec::with_capacity(n);
            for (c, chunk) in chunks.iter().enumerate() {
                if c != k && c != val_chunk {
                    train.extend_from_slice(chunk);
                }
            }
            FoldIndices {
                fold: k,
                train,
                val: chunks[val_chunk].clone(),
                test: chunks[k].clone(),
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}
