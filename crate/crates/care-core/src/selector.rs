//! Subgraph selection: score-based top-k node pooling plus a pass-through
//! variant.
//!
//! The pooling path scores nodes with a 1-dimensional graph convolution
//! `s = Â H w`, keeps the `max(1, ceil(ratio * n))` best-scoring nodes
//! (ties to the lower index), and gates the kept rows with `tanh` of their
//! scores so the score weights stay trainable. The index set itself is a
//! discrete forward-pass decision: gradients flow through the scores of the
//! kept nodes, with the set held fixed as recorded.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Tape, Tensor};
use crate::error::{CareError, Result};

/// Which selector to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    Sagpool,
    None,
}

impl SelectorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectorKind::Sagpool => "sagpool",
            SelectorKind::None => "none",
        }
    }
}

/// Selector settings. `pooling_ratio` must lie in (0, 1].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    pub pooling_ratio: f64,
}

impl SelectorConfig {
    pub fn new(kind: SelectorKind, pooling_ratio: f64) -> Result<Self> {
        if !(pooling_ratio > 0.0 && pooling_ratio <= 1.0) {
            return Err(CareError::config(format!(
                "pooling ratio must be in (0, 1], got {pooling_ratio}"
            )));
        }
        Ok(SelectorConfig {
            kind,
            pooling_ratio,
        })
    }
}

/// Output of a selection: the induced raw adjacency over kept nodes (a
/// constant — adjacency is never differentiated), the gated node embeddings
/// on the tape, and the kept indices in increasing order.
#[derive(Clone, Debug)]
pub struct Selection {
    pub a_sub: Matrix,
    pub h_sub: Tensor,
    pub kept: Vec<usize>,
}

/// Number of nodes kept from `n` at `ratio`: `max(1, ceil(ratio * n))`.
pub fn kept_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n)
}

/// Top-k pooling. `a_norm`/`h` live on the tape; `a_raw` is the raw
/// adjacency the induced submatrix is cut from; `w` is the `h x 1` score
/// weight column.
pub fn sagpool_select(
    tape: &mut Tape,
    a_norm: Tensor,
    a_raw: &Matrix,
    h: Tensor,
    w: Tensor,
    ratio: f64,
) -> Result<Selection> {
    let n = h.rows();
    if n == 0 {
        return Err(CareError::contract("sagpool_select", "empty graph"));
    }
    if w.cols() != 1 {
        return Err(CareError::contract(
            "sagpool_select",
            format!("score weights must be a column, got {}x{}", w.rows(), w.cols()),
        ));
    }

    // Scores: 1-dimensional GCN, s = Â H w  (n x 1).
    let hw = tape.matmul(h, w)?;
    let scores = tape.matmul(a_norm, hw)?;

    // Discrete top-k on forward values; ties broken toward the lower index
    // by the sort key. Kept indices are reported in increasing order.
    let k = kept_count(n, ratio);
    let values = tape.value(scores).to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();

    // Gate kept rows with tanh of their scores.
    let h_kept = tape.gather_rows(h, &kept)?;
    let s_kept = tape.gather_rows(scores, &kept)?;
    let gate = tape.tanh(s_kept);
    let h_sub = tape.scale_rows(h_kept, gate)?;

    // Induced raw adjacency over kept nodes.
    let mut a_sub = Matrix::zeros(k, k);
    for (i, &u) in kept.iter().enumerate() {
        for (j, &v) in kept.iter().enumerate() {
            a_sub.set(i, j, a_raw.get(u, v));
        }
    }

    Ok(Selection { a_sub, h_sub, kept })
}

/// Pass-through selector: the whole graph is the "subgraph".
pub fn none_select(_tape: &mut Tape, a_raw: &Matrix, h: Tensor) -> Result<Selection> {
    if h.rows() == 0 {
        return Err(CareError::contract("none_select", "empty graph"));
    }
    Ok(Selection {
        a_sub: a_raw.clone(),
        h_sub: h,
        kept: (0..h.rows()).collect(),
    })
}
