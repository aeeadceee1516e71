//! Message-passing encoder layers (GCN, GraphSAGE-mean, GIN) and READOUT.
//!
//! Each layer is a free function over tape tensors, so the backward pass
//! comes for free from `diffcore`. [`EncoderStack`] bundles `depth` layers
//! with their parameters and runs them in sequence, returning every
//! intermediate node-embedding matrix (the hierarchical variant refines each
//! one; the global variant uses only the last).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore, Reduce, Tape, Tensor};
use crate::error::{CareError, Result};
use crate::graphio::{neighbor_mean_operator, normalize_adjacency, GraphRecord};

/// Backbone flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Gcn,
    Sage,
    Gin,
}

impl EncoderKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EncoderKind::Gcn => "gcn",
            EncoderKind::Sage => "sage",
            EncoderKind::Gin => "gin",
        }
    }
}

/// Graph-level pooling flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    Mean,
    Sum,
}

impl ReadoutMode {
    /// Conventional pairing: mean pooling for GCN/GraphSAGE, sum for GIN.
    pub fn default_for(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Gcn | EncoderKind::Sage => ReadoutMode::Mean,
            EncoderKind::Gin => ReadoutMode::Sum,
        }
    }
}

/// A graph preprocessed into every operator the encoders need: raw symmetric
/// adjacency, its self-loop symmetric normalization, and the row-normalized
/// neighbor-mean operator. Immutable after construction and shared read-only
/// across fold workers.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub label: usize,
    pub a_raw: Matrix,
    pub a_norm: Matrix,
    pub neigh_mean: Matrix,
    pub features: Matrix,
}

impl PreparedGraph {
    pub fn from_record(record: &GraphRecord) -> Result<Self> {
        Ok(PreparedGraph {
            label: record.label,
            a_norm: normalize_adjacency(&record.adjacency)?,
            neigh_mean: neighbor_mean_operator(&record.adjacency),
            a_raw: record.adjacency.clone(),
            features: record.features.clone(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.a_raw.rows()
    }
}

/// The per-graph constants of one forward pass, registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphTensors {
    pub a_norm: Tensor,
    pub a_raw: Tensor,
    pub neigh_mean: Tensor,
    pub x: Tensor,
}

impl GraphTensors {
    pub fn register(tape: &mut Tape, graph: &PreparedGraph) -> Self {
        GraphTensors {
            a_norm: tape.constant(&graph.a_norm),
            a_raw: tape.constant(&graph.a_raw),
            neigh_mean: tape.constant(&graph.neigh_mean),
            x: tape.constant(&graph.features),
        }
    }
}

/// Linear part of a GCN layer: `Â H W` (no activation). Exposed for tests
/// and inspection; the full layer applies ReLU on top.
pub fn gcn_layer_linear(tape: &mut Tape, a_norm: Tensor, h: Tensor, w: Tensor) -> Result<Tensor> {
    let ah = tape.matmul(a_norm, h)?;
    tape.matmul(ah, w)
}

/// GCN layer: `ReLU(Â H W)`.
pub fn gcn_layer(tape: &mut Tape, a_norm: Tensor, h: Tensor, w: Tensor) -> Result<Tensor> {
    let lin = gcn_layer_linear(tape, a_norm, h, w)?;
    Ok(tape.relu(lin))
}

/// GraphSAGE layer with full-neighborhood mean aggregation:
/// `ReLU(H W_self + meanNeigh(H) W_neigh)`. `neigh_mean` is the
/// row-normalized adjacency from [`neighbor_mean_operator`]; isolated nodes
/// contribute a zero neighbor term.
pub fn sage_layer_with_operator(
    tape: &mut Tape,
    neigh_mean: Tensor,
    h: Tensor,
    w_self: Tensor,
    w_neigh: Tensor,
) -> Result<Tensor> {
    let own = tape.matmul(h, w_self)?;
    let mh = tape.matmul(neigh_mean, h)?;
    let nb = tape.matmul(mh, w_neigh)?;
    let sum = tape.add(own, nb)?;
    Ok(tape.relu(sum))
}

/// [`sage_layer_with_operator`] building the neighbor-mean operator from a
/// raw adjacency on the fly.
pub fn sage_layer(
    tape: &mut Tape,
    a_raw: &Matrix,
    h: Tensor,
    w_self: Tensor,
    w_neigh: Tensor,
) -> Result<Tensor> {
    let op = neighbor_mean_operator(a_raw);
    let op_t = tape.constant(&op);
    sage_layer_with_operator(tape, op_t, h, w_self, w_neigh)
}

/// GIN aggregation: `(1 + ε) H_v + Σ_{u ∈ N(v)} H_u`, rowwise. `eps` is a
/// learnable 1x1 tensor. Exposed separately so tests can check the
/// aggregation with the MLP bypassed.
pub fn gin_aggregate(tape: &mut Tape, a_raw: Tensor, h: Tensor, eps: Tensor) -> Result<Tensor> {
    let neigh_sum = tape.matmul(a_raw, h)?;
    let one = tape.constant_scalar(1.0);
    let one_plus_eps = tape.add(one, eps)?;
    let own = tape.mul_scalar(h, one_plus_eps)?;
    tape.add(own, neigh_sum)
}

/// GIN layer: a two-affine-layer MLP with ReLU between, applied to the
/// aggregation. The MLP's hidden width equals its output width.
#[allow(clippy::too_many_arguments)]
pub fn gin_layer(
    tape: &mut Tape,
    a_raw: Tensor,
    h: Tensor,
    eps: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
) -> Result<Tensor> {
    let agg = gin_aggregate(tape, a_raw, h, eps)?;
    let l1 = tape.matmul(agg, w1)?;
    let l1b = tape.add_row_bias(l1, b1)?;
    let hid = tape.relu(l1b);
    let l2 = tape.matmul(hid, w2)?;
    tape.add_row_bias(l2, b2)
}

/// READOUT: collapse node embeddings `n x m` to one graph vector `1 x m` by
/// row mean or row sum.
pub fn readout(tape: &mut Tape, h: Tensor, mode: ReadoutMode) -> Result<Tensor> {
    if h.rows() == 0 {
        return Err(CareError::contract("readout", "empty graph"));
    }
    Ok(match mode {
        ReadoutMode::Mean => tape.reduce(h, Reduce::MeanRows),
        ReadoutMode::Sum => tape.reduce(h, Reduce::SumRows),
    })
}

#[derive(Clone, Debug)]
enum LayerParams {
    Gcn {
        w: ParamId,
    },
    Sage {
        w_self: ParamId,
        w_neigh: ParamId,
    },
    Gin {
        eps: ParamId,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

/// `depth` encoder layers of one kind with registered parameters. The first
/// layer maps the feature dimension to `hidden`; later layers are
/// `hidden -> hidden`.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub kind: EncoderKind,
    pub readout_mode: ReadoutMode,
    hidden: usize,
    layers: Vec<LayerParams>,
}

impl EncoderStack {
    /// Register `depth` layers' parameters under `prefix` (e.g. `enc`),
    /// initialized uniformly in ±1/√fan_in.
    pub fn new(
        kind: EncoderKind,
        depth: usize,
        in_dim: usize,
        hidden: usize,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(CareError::config("encoder depth must be at least 1".to_string()));
        }
        if in_dim == 0 || hidden == 0 {
            return Err(CareError::config(
                "encoder widths must be positive".to_string(),
            ));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 { in_dim } else { hidden };
            let name = |part: &str| format!("{prefix}.l{l}.{part}");
            let layer = match kind {
                EncoderKind::Gcn => LayerParams::Gcn {
                    w: store.register_uniform(&name("w"), fan_in, hidden, fan_in, rng)?,
                },
                EncoderKind::Sage => LayerParams::Sage {
                    w_self: store.register_uniform(&name("w_self"), fan_in, hidden, fan_in, rng)?,
                    w_neigh: store.register_uniform(&name("w_neigh"), fan_in, hidden, fan_in, rng)?,
                },
                EncoderKind::Gin => LayerParams::Gin {
                    eps: store.register(&name("eps"), Matrix::scalar(0.0))?,
                    w1: store.register_uniform(&name("w1"), fan_in, hidden, fan_in, rng)?,
                    b1: store.register_uniform(&name("b1"), 1, hidden, fan_in, rng)?,
                    w2: store.register_uniform(&name("w2"), hidden, hidden, hidden, rng)?,
                    b2: store.register_uniform(&name("b2"), 1, hidden, hidden, rng)?,
                },
            };
            layers.push(layer);
        }
        Ok(EncoderStack {
            kind,
            readout_mode: ReadoutMode::default_for(kind),
            hidden,
            layers,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Run all layers on one graph. `leafed[id.index()]` must hold the tape
    /// leaf of every parameter (see `ParamStore::leaf_all`). Returns the
    /// output of every layer in order; the last entry is the final node
    /// embedding matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        leafed: &[Tensor],
        graph: &GraphTensors,
    ) -> Result<Vec<Tensor>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = graph.x;
        for layer in &self.layers {
            h = match layer {
                LayerParams::Gcn { w } => gcn_layer(tape, graph.a_norm, h, leafed[w.index()])?,
                LayerParams::Sage { w_self, w_neigh } => sage_layer_with_operator(
                    tape,
                    graph.neigh_mean,
                    h,
                    leafed[w_self.index()],
                    leafed[w_neigh.index()],
                )?,
                LayerParams::Gin {
                    eps,
                    w1,
                    b1,
                    w2,
                    b2,
                } => gin_layer(
                    tape,
                    graph.a_raw,
                    h,
                    leafed[eps.index()],
                    leafed[w1.index()],
                    leafed[b1.index()],
                    leafed[w2.index()],
                    leafed[b2.index()],
                )?,
            };
            outputs.push(h);
        }
        Ok(outputs)
    }
}
