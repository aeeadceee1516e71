//! Exact integer accounting of model capacity: per-layer multiplication
//! counts for the plain message-passing classifier and for the refined
//! variant, parameter counts, the width that equalizes parameters, and the
//! capacity-bound comparison.
//!
//! The capacity bound has the form `α · (d · q(d))²` for a symbolic
//! constant α, where `q(d)` counts the multiplications of a depth-`d`
//! forward pass. α is never assigned a number: cross-model comparisons use
//! the α-free ratio `(q₁/q₂)²`. Under parameter matching (`t₁ = t₂`, i.e.
//! `h₁ = √(4h₂² + h₂)`), the refined model's count is strictly smaller:
//! `q₁(1) − q₂(1) = n²(√(4h₂² + h₂) − 2h₂) > 0`.

use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};

/// One layer's dimension schedule: the message-passing transform
/// (`gcn_in → gcn_out`), the set encoder (`set_in → set_out`), and the
/// refinement transform (`trans_in → trans_out`). The refinement input
/// concatenates the graph and class representations, so
/// `trans_in = gcn_out + set_out` must hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub gcn_in: u64,
    pub gcn_out: u64,
    pub set_in: u64,
    pub set_out: u64,
    pub trans_in: u64,
    pub trans_out: u64,
}

impl LayerDims {
    /// The base-width instantiation: every dimension equals `h2` except the
    /// concatenated refinement input, which is `2·h2`.
    pub fn base_width(h2: u64) -> Self {
        LayerDims {
            gcn_in: h2,
            gcn_out: h2,
            set_in: h2,
            set_out: h2,
            trans_in: 2 * h2,
            trans_out: h2,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gcn_in", self.gcn_in),
            ("gcn_out", self.gcn_out),
            ("set_in", self.set_in),
            ("set_out", self.set_out),
            ("trans_in", self.trans_in),
            ("trans_out", self.trans_out),
        ] {
            if v == 0 {
                return Err(CareError::config(format!(
                    "layer dimension {name} must be a positive integer"
                )));
            }
        }
        if self.trans_in != self.gcn_out + self.set_out {
            return Err(CareError::config(format!(
                "trans_in must equal gcn_out + set_out (concatenated input): \
                 {} != {} + {}",
                self.trans_in, self.gcn_out, self.set_out
            )));
        }
        Ok(())
    }
}

/// A complete complexity profile: node count and the per-layer schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VcProfile {
    pub n: u64,
    pub layers: Vec<LayerDims>,
}

impl VcProfile {
    /// `d` identical base-width layers over `n` nodes.
    pub fn base(n: u64, h2: u64, d: u64) -> Result<Self> {
        if n == 0 || h2 == 0 || d == 0 {
            return Err(CareError::config(
                "n, h2, and d must be positive integers".to_string(),
            ));
        }
        Ok(VcProfile {
            n,
            layers: vec![LayerDims::base_width(h2); d as usize],
        })
    }

    pub fn depth(&self) -> u64 {
        self.layers.len() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CareError::config("n must be a positive integer".to_string()));
        }
        if self.layers.is_empty() {
            return Err(CareError::config(
                "profile needs at least one layer".to_string(),
            ));
        }
        for l in &self.layers {
            l.validate()?;
        }
        Ok(())
    }
}

/// Multiplications of the plain classifier:
/// `q₁(d) = Σ_layers (n²·gcn_in + n·gcn_in·gcn_out)`.
pub fn mults_gcn(profile: &VcProfile) -> Result<u64> {
    profile.validate()?;
    let n = profile.n;
    let mut q = 0u64;
    for l in &profile.layers {
        q += n * n * l.gcn_in + n * l.gcn_in * l.gcn_out;
    }
    Ok(q)
}

/// Multiplications of the refined classifier:
/// `q₂(d) = Σ_layers (q_gcn + q_subgraph + q_set + q_trans)` with
/// `q_gcn = n²·gcn_in + n·gcn_in·gcn_out`,
/// `q_subgraph = n²·gcn_out + n·gcn_out` (the scoring layer: a
/// message-passing pass with one output column; node ranking costs no
/// multiplications), `q_set = n·set_in·set_out`, and
/// `q_trans = n·trans_in·trans_out`.
pub fn mults_care(profile: &VcProfile) -> Result<u64> {
    profile.validate()?;
    let n = profile.n;
    let mut q = 0u64;
    for l in &profile.layers {
        let q_gcn = n * n * l.gcn_in + n * l.gcn_in * l.gcn_out;
        let q_subgraph = n * n * l.gcn_out + n * l.gcn_out;
        let q_set = n * l.set_in * l.set_out;
        let q_trans = n * l.trans_in * l.trans_out;
        q += q_gcn + q_subgraph + q_set + q_trans;
    }
    Ok(q)
}

/// Parameter counts `(t₁, t₂)`: the plain model owns the transform weights
/// (`Σ gcn_in·gcn_out`); the refined model adds, per layer, the scoring
/// column (`gcn_out`), the set encoder (`set_in·set_out`), and the
/// refinement transform (`trans_in·trans_out`).
pub fn param_counts(profile: &VcProfile) -> Result<(u64, u64)> {
    profile.validate()?;
    let mut t1 = 0u64;
    let mut t2 = 0u64;
    for l in &profile.layers {
        let shared = l.gcn_in * l.gcn_out;
        t1 += shared;
        t2 += shared + l.gcn_out + l.set_in * l.set_out + l.trans_in * l.trans_out;
    }
    Ok((t1, t2))
}

/// The real-valued plain-model width with the same parameter count as a
/// base-width refined model: `t₁ = t₂` gives `h₁ = √(4h₂² + h₂)`. Kept
/// real — the algebra is over reals, not rounded widths.
pub fn match_parameters(h2: u64) -> f64 {
    let h = h2 as f64;
    (4.0 * h * h + h).sqrt()
}

/// The capacity-bound comparison at one grid point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CapacityReport {
    pub n: u64,
    pub h2: u64,
    pub d: u64,
    /// Parameter-matched plain width `√(4h₂² + h₂)` (real).
    pub h1_matched: f64,
    /// Integer parameter counts at base width `h₂` (refined) and the exact
    /// matched count they share.
    pub t2: u64,
    /// Plain-model multiplications at the matched real width
    /// `d·(n·h₁² + n²·h₁)`.
    pub q1: f64,
    /// Refined-model multiplications at base width
    /// `d·(4n·h₂² + (2n² + n)·h₂)` (exact integer).
    pub q2: u64,
    /// `q₁ − q₂ = d·n²·(√(4h₂² + h₂) − 2h₂)`.
    pub difference: f64,
    /// Capacity-bound ratio `(q₁/q₂)²` — the symbolic constant cancels.
    pub bound_ratio: f64,
    /// Whether the plain model's count (hence bound) is strictly larger.
    pub verdict: bool,
}

/// Compare the parameter-matched plain classifier against the base-width
/// refined classifier over `d` identical layers: compute `q₁` at the
/// matched real width `h₁ = √(4h₂² + h₂)`, `q₂` at width `h₂`, their
/// difference `d·n²(√(4h₂²+h₂) − 2h₂)`, and the α-free bound ratio.
pub fn capacity_check(n: u64, h2: u64, d: u64) -> Result<CapacityReport> {
    if n == 0 || h2 == 0 || d == 0 {
        return Err(CareError::config(
            "n, h2, and d must be positive integers".to_string(),
        ));
    }
    let profile = VcProfile::base(n, h2, d)?;
    let (_, t2) = param_counts(&profile)?;
    let h1 = match_parameters(h2);
    let nf = n as f64;
    let df = d as f64;
    // Per layer: n·h₁² + n²·h₁, with h₁² = 4h₂² + h₂ exactly.
    let h1_sq = (4 * h2 * h2 + h2) as f64;
    let q1 = df * (nf * h1_sq + nf * nf * h1);
    let q2 = mults_care(&profile)?;
    let difference = df * nf * nf * (h1 - 2.0 * h2 as f64);
    let ratio = q1 / q2 as f64;
    Ok(CapacityReport {
        n,
        h2,
        d,
        h1_matched: h1,
        t2,
        q1,
        q2,
        difference,
        bound_ratio: ratio * ratio,
        verdict: q1 > q2 as f64,
    })
}

/// Capacity-bound value `(d·q)²` with the constant α carried symbolically;
/// callers compare two of these as a ratio, which is α-free.
pub fn vc_upper_bound_expr(q: f64, d: u64) -> f64 {
    let dq = d as f64 * q;
    dq * dq
}

/// One row of the exhaustive sweep summary.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: u64,
    pub all_true: bool,
    pub min_difference: f64,
    pub max_difference: f64,
}

/// Run `capacity_check` over `n ∈ [1, n_max]`, `h₂ ∈ [1, h2_max]` for every
/// depth in `depths`, verifying the verdict everywhere.
pub fn sweep(n_max: u64, h2_max: u64, depths: &[u64]) -> Result<SweepSummary> {
    if n_max == 0 || h2_max == 0 || depths.is_empty() {
        return Err(CareError::config(
            "sweep needs positive bounds and at least one depth".to_string(),
        ));
    }
    let mut cells = 0u64;
    let mut all_true = true;
    let mut min_diff = f64::INFINITY;
    let mut max_diff = f64::NEG_INFINITY;
    for &d in depths {
        for n in 1..=n_max {
            for h2 in 1..=h2_max {
                let r = capacity_check(n, h2, d)?;
                cells += 1;
                all_true &= r.verdict;
                min_diff = min_diff.min(r.difference);
                max_diff = max_diff.max(r.difference);
            }
        }
    }
    Ok(SweepSummary {
        cells,
        all_true,
        min_difference: min_diff,
        max_difference: max_diff,
    })
}

/// Aligned plain-text table of one report, for terminal output.
pub fn report_table(r: &CapacityReport) -> String {
    format!(
        "{:>6} {:>6} {:>4} {:>12} {:>10} {:>16} {:>16} {:>14} {:>12} {:>8}\n",
        r.n,
        r.h2,
        r.d,
        format!("{:.5}", r.h1_matched),
        r.t2,
        format!("{:.3}", r.q1),
        r.q2,
        format!("{:.6}", r.difference),
        format!("{:.6}", r.bound_ratio),
        r.verdict
    )
}

/// Header line matching [`report_table`].
pub fn report_table_header() -> String {
    format!(
        "{:>6} {:>6} {:>4} {:>12} {:>10} {:>16} {:>16} {:>14} {:>12} {:>8}\n",
        "n", "h2", "d", "h1", "t2", "q1", "q2", "diff", "ratio", "verdict"
    )
}
