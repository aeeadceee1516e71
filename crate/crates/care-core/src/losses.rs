//! Intra-class, inter-class, combined class loss, and total loss, plus the
//! ablation variants (single-term designs and the L2-distance form).
//!
//! The cosine form rewards tight classes and separated representatives:
//! `L_class = exp(L_inter - λ1 · L_intra)` where `L_intra` averages, per
//! class then across classes, the cosine similarity between each subgraph
//! representation and its class representative, and `L_inter` averages the
//! pairwise similarity between distinct representatives. The distance form
//! swaps similarity for Euclidean distance and therefore flips the sign:
//! `L_class = exp(L_intra - L_inter)`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Reduce, Tape, Tensor};
use crate::error::{CareError, Result};

/// Which similarity powers the class loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossMode {
    Cosine,
    L2,
    Off,
}

impl ClassLossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLossMode::Cosine => "cosine",
            ClassLossMode::L2 => "l2",
            ClassLossMode::Off => "off",
        }
    }
}

/// Which terms enter the total loss (the ablation grid's loss designs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossDesign {
    /// Cross-entropy only.
    Cls,
    /// `L_cls - λ2 · exp(L_intra)` — reward intra-class similarity alone.
    Intra,
    /// `L_cls + λ2 · exp(L_inter)` — penalize inter-class similarity alone.
    Inter,
    /// `L_cls + λ2 · L_class` — the full combined objective.
    Combine,
}

impl LossDesign {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossDesign::Cls => "cls",
            LossDesign::Intra => "intra",
            LossDesign::Inter => "inter",
            LossDesign::Combine => "combine",
        }
    }
}

/// Reading of the distance form's set-normalization operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Norm {
    /// Divide by element count (averaging) — the default reading.
    Mean,
    /// Take the maximum element instead.
    Max,
}

/// Loss hyperparameters and switches.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mode: ClassLossMode,
    pub design: LossDesign,
    pub l2_norm: L2Norm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            mode: ClassLossMode::Cosine,
            design: LossDesign::Combine,
            l2_norm: L2Norm::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(CareError::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        match (self.mode, self.design) {
            (ClassLossMode::Off, LossDesign::Cls) => Ok(()),
            (ClassLossMode::Off, d) => Err(CareError::config(format!(
                "class loss mode 'off' only supports design 'cls', got {d:?}"
            ))),
            (ClassLossMode::L2, LossDesign::Intra | LossDesign::Inter) => {
                Err(CareError::config(
                    "the distance-based class loss defines only the combined design; \
                     single-term designs exist for the cosine form"
                        .to_string(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Mean or max over a non-empty list of scalar tensors. The max picks the
/// element with the largest forward value (its subgradient), which is what a
/// dedicated max operator would do.
fn reduce_scalars(tape: &mut Tape, scalars: &[Tensor], norm: L2Norm) -> Result<Tensor> {
    match norm {
        L2Norm::Mean => {
            let stacked = tape.stack_scalars(scalars)?;
            Ok(tape.reduce(stacked, Reduce::MeanAll))
        }
        L2Norm::Max => {
            let mut best = scalars[0];
            for &t in &scalars[1..] {
                if tape.scalar_value(t)? > tape.scalar_value(best)? {
                    best = t;
                }
            }
            Ok(best)
        }
    }
}

/// Group batch items by class, verifying each present class has a
/// representative. Returns `(class, member hg_subs)` pairs in class order.
fn group_by_class(
    op: &'static str,
    items: &[(Tensor, usize)],
    hc: &[Option<Tensor>],
) -> Result<Vec<(usize, Vec<Tensor>)>> {
    if items.is_empty() {
        return Err(CareError::contract(op, "empty batch"));
    }
    let mut groups: Vec<(usize, Vec<Tensor>)> = Vec::new();
    for &(rep, label) in items {
        if label >= hc.len() {
            return Err(CareError::contract(
                op,
                format!("label {label} out of range for {} classes", hc.len()),
            ));
        }
        if hc[label].is_none() {
            return Err(CareError::contract(
                op,
                format!("class {label} appears in the batch but has no representative"),
            ));
        }
        match groups.iter_mut().find(|(c, _)| *c == label) {
            Some((_, members)) => members.push(rep),
            None => groups.push((label, vec![rep])),
        }
    }
    groups.sort_by_key(|(c, _)| *c);
    Ok(groups)
}

/// Intra-class similarity: for each class present in the batch, average the
/// cosine similarity between its representative and each member's subgraph
/// representation; then average across those classes. Absent classes are
/// skipped. Result lies in [-1, 1].
pub fn intra_class_loss(
    tape: &mut Tape,
    items: &[(Tensor, usize)],
    hc: &[Option<Tensor>],
) -> Result<Tensor> {
    let groups = group_by_class("intra_class_loss", items, hc)?;
    let mut class_means = Vec::with_capacity(groups.len());
    for (class, members) in groups {
        let rep = hc[class].expect("verified by group_by_class");
        let sims: Vec<Tensor> = members
            .iter()
            .map(|&m| tape.cosine_similarity(m, rep))
            .collect::<Result<_>>()?;
        class_means.push(reduce_scalars(tape, &sims, L2Norm::Mean)?);
    }
    reduce_scalars(tape, &class_means, L2Norm::Mean)
}

/// An inter-class term plus a degeneracy flag (fewer than two classes had
/// representatives, so the term is a constant 0 and the caller should warn).
#[derive(Clone, Copy, Debug)]
pub struct InterClassLoss {
    pub value: Tensor,
    pub degenerate: bool,
}

/// Inter-class similarity: average cosine similarity over unordered pairs of
/// distinct class representatives. Result lies in [-1, 1].
pub fn inter_class_loss(tape: &mut Tape, hc: &[Option<Tensor>]) -> Result<InterClassLoss> {
    let present: Vec<Tensor> = hc.iter().flatten().copied().collect();
    if present.len() < 2 {
        return Ok(InterClassLoss {
            value: tape.constant_scalar(0.0),
            degenerate: true,
        });
    }
    let mut sims = Vec::with_capacity(present.len() * (present.len() - 1) / 2);
    for i in 0..present.len() {
        for j in (i + 1)..present.len() {
            sims.push(tape.cosine_similarity(present[i], present[j])?);
        }
    }
    Ok(InterClassLoss {
        value: reduce_scalars(tape, &sims, L2Norm::Mean)?,
        degenerate: false,
    })
}

/// Combined cosine class loss: `exp(inter - λ1 · intra)`. Always in
/// `[e^(-1-λ1), e^(1+λ1)]` because both inputs are averaged cosines.
pub fn class_loss(tape: &mut Tape, intra: Tensor, inter: Tensor, lambda1: f64) -> Result<Tensor> {
    let scaled = tape.scale(intra, lambda1);
    let diff = tape.sub(inter, scaled)?;
    Ok(tape.exp(diff))
}

/// Distance-form intra term: normalized (mean or max) Euclidean distance
/// between members and their representative, nested per class then across
/// classes like the cosine form.
pub fn l2_intra_class_loss(
    tape: &mut Tape,
    items: &[(Tensor, usize)],
    hc: &[Option<Tensor>],
    norm: L2Norm,
) -> Result<Tensor> {
    let groups = group_by_class("l2_intra_class_loss", items, hc)?;
    let mut class_terms = Vec::with_capacity(groups.len());
    for (class, members) in groups {
        let rep = hc[class].expect("verified by group_by_class");
        let dists: Vec<Tensor> = members
            .iter()
            .map(|&m| tape.l2_distance(m, rep))
            .collect::<Result<_>>()?;
        class_terms.push(reduce_scalars(tape, &dists, norm)?);
    }
    reduce_scalars(tape, &class_terms, norm)
}

/// Distance-form inter term: normalized pairwise distance between distinct
/// representatives.
pub fn l2_inter_class_loss(
    tape: &mut Tape,
    hc: &[Option<Tensor>],
    norm: L2Norm,
) -> Result<InterClassLoss> {
    let present: Vec<Tensor> = hc.iter().flatten().copied().collect();
    if present.len() < 2 {
        return Ok(InterClassLoss {
            value: tape.constant_scalar(0.0),
            degenerate: true,
        });
    }
    let mut dists = Vec::with_capacity(present.len() * (present.len() - 1) / 2);
    for i in 0..present.len() {
        for j in (i + 1)..present.len() {
            dists.push(tape.l2_distance(present[i], present[j])?);
        }
    }
    Ok(InterClassLoss {
        value: reduce_scalars(tape, &dists, norm)?,
        degenerate: false,
    })
}

/// Combined distance class loss: `exp(intra - inter)` — the sign flips
/// versus the cosine form because distance is a dissimilarity.
pub fn l2_class_loss(tape: &mut Tape, intra: Tensor, inter: Tensor) -> Result<Tensor> {
    let diff = tape.sub(intra, inter)?;
    Ok(tape.exp(diff))
}

/// Total training loss for a design. `class_term` is the design's class
/// contribution — `exp(L_intra)` for `intra`, `exp(L_inter)` for `inter`,
/// the combined class loss for `combine` — and ignored (may be `None`) for
/// `cls`, which returns `l_cls` itself (bit-identical).
pub fn total_loss(
    tape: &mut Tape,
    l_cls: Tensor,
    class_term: Option<Tensor>,
    lambda2: f64,
    design: LossDesign,
) -> Result<Tensor> {
    let need = |t: Option<Tensor>| {
        t.ok_or_else(|| {
            CareError::contract("total_loss", format!("design {design:?} needs a class term"))
        })
    };
    Ok(match design {
        LossDesign::Cls => l_cls,
        LossDesign::Intra => {
            let term = tape.scale(need(class_term)?, lambda2);
            tape.sub(l_cls, term)?
        }
        LossDesign::Inter => {
            let term = tape.scale(need(class_term)?, lambda2);
            tape.add(l_cls, term)?
        }
        LossDesign::Combine => {
            let term = tape.scale(need(class_term)?, lambda2);
            tape.add(l_cls, term)?
        }
    })
}

/// All scalar pieces of one batch's loss, for optimization and tracing.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub intra: Option<Tensor>,
    pub inter: Option<Tensor>,
    pub class_loss: Option<Tensor>,
    /// Set when the inter term degenerated to 0 for lack of a second class.
    pub inter_degenerate: bool,
}

/// Assemble the total loss and its components for one batch.
///
/// `items` holds each graph's `(hg_sub, label)`; `hc[c]` the class
/// representative tensors (live where the batch refreshed them, cached
/// constants otherwise). Components are computed whenever the mode allows —
/// even for the `cls` design, where they are monitored but excluded from
/// the total.
pub fn assemble_loss(
    tape: &mut Tape,
    l_cls: Tensor,
    items: &[(Tensor, usize)],
    hc: &[Option<Tensor>],
    cfg: &LossConfig,
) -> Result<LossParts> {
    cfg.validate()?;
    if cfg.mode == ClassLossMode::Off || items.is_empty() {
        return Ok(LossParts {
            total: l_cls,
            intra: None,
            inter: None,
            class_loss: None,
            inter_degenerate: false,
        });
    }

    let (intra, inter_out, combined) = match cfg.mode {
        ClassLossMode::Cosine => {
            let intra = intra_class_loss(tape, items, hc)?;
            let inter = inter_class_loss(tape, hc)?;
            let combined = class_loss(tape, intra, inter.value, cfg.lambda1)?;
            (intra, inter, combined)
        }
        ClassLossMode::L2 => {
            let intra = l2_intra_class_loss(tape, items, hc, cfg.l2_norm)?;
            let inter = l2_inter_class_loss(tape, hc, cfg.l2_norm)?;
            let combined = l2_class_loss(tape, intra, inter.value)?;
            (intra, inter, combined)
        }
        ClassLossMode::Off => unreachable!("handled above"),
    };

    let class_term = match cfg.design {
        LossDesign::Cls | LossDesign::Combine => Some(combined),
        LossDesign::Intra => Some(tape.exp(intra)),
        LossDesign::Inter => Some(tape.exp(inter_out.value)),
    };
    let total = total_loss(tape, l_cls, class_term, cfg.lambda2, cfg.design)?;

    Ok(LossParts {
        total,
        intra: Some(intra),
        inter: Some(inter_out.value),
        class_loss: Some(combined),
        inter_degenerate: inter_out.degenerate,
    })
}
