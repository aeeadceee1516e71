//! Class-aware refinement: per-class bags of subgraph representations,
//! set-encoded class representatives, representation refinement, and
//! pseudo-labeling for evaluation.
//!
//! During training, each graph's selected-subgraph representation is stored
//! (detached) in its class's bag; the class representative is the set
//! encoder ρ applied to the bag mean, with the current graph's live tensor
//! substituted for its own just-stored copy so gradients reach ρ and the
//! encoder. During evaluation everything is frozen: the stored
//! representatives are looked up, and the class is chosen by cosine
//! similarity (pseudo-labeling) because the true label is withheld.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Tensor};
use crate::encoders::{readout, ReadoutMode};
use crate::error::{CareError, Result};
use crate::selector::{none_select, sagpool_select, Selection, SelectorConfig, SelectorKind};
use rand_chacha::ChaCha8Rng;

/// Default bag capacity: the most recent reps per class kept for the mean.
pub const DEFAULT_BAG_CAPACITY: usize = 64;

/// Whether a pass may mutate bags and representatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-class bags and cached class representatives. Owned by exactly one
/// training run; evaluation passes only read it.
#[derive(Clone, Debug)]
pub struct ClassState {
    dim: usize,
    capacity: usize,
    bags: Vec<VecDeque<Matrix>>,
    hc: Vec<Option<Matrix>>,
    staleness: Vec<u64>,
}

impl ClassState {
    pub fn new(class_count: usize, dim: usize, capacity: usize) -> Self {
        ClassState {
            dim,
            capacity: capacity.max(1),
            bags: (0..class_count).map(|_| VecDeque::new()).collect(),
            hc: vec![None; class_count],
            staleness: vec![0; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.bags.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bag_len(&self, class: usize) -> usize {
        self.bags[class].len()
    }

    /// Append a detached representation to the class's ring buffer, evicting
    /// the oldest entry at capacity. Training-mode only.
    pub fn update_bag(&mut self, class: usize, rep: Matrix, mode: Mode) -> Result<()> {
        if mode == Mode::Eval {
            return Err(CareError::contract(
                "ClassState::update_bag",
                "bags are frozen during evaluation",
            ));
        }
        if rep.rows() != 1 || rep.cols() != self.dim {
            return Err(CareError::contract(
                "ClassState::update_bag",
                format!(
                    "representation is {}x{}, state dimension is {}",
                    rep.rows(),
                    rep.cols(),
                    self.dim
                ),
            ));
        }
        if class >= self.bags.len() {
            return Err(CareError::contract(
                "ClassState::update_bag",
                format!("class {class} out of range"),
            ));
        }
        let bag = &mut self.bags[class];
        if bag.len() == self.capacity {
            bag.pop_front();
        }
        bag.push_back(rep);
        self.staleness[class] += 1;
        Ok(())
    }

    /// Sum of all bag members except the newest (the substitution point for
    /// the live representation). Zero when the bag holds one member.
    fn sum_excluding_newest(&self, class: usize) -> Matrix {
        let mut sum = Matrix::zeros(1, self.dim);
        let bag = &self.bags[class];
        for member in bag.iter().take(bag.len().saturating_sub(1)) {
            for (s, &v) in sum.as_mut_slice().iter_mut().zip(member.as_slice()) {
                *s += v;
            }
        }
        sum
    }

    /// Sum of every bag member.
    fn sum_all(&self, class: usize) -> Matrix {
        let mut sum = Matrix::zeros(1, self.dim);
        for member in &self.bags[class] {
            for (s, &v) in sum.as_mut_slice().iter_mut().zip(member.as_slice()) {
                *s += v;
            }
        }
        sum
    }

    /// The cached class representative, if the class has ever been trained.
    pub fn hc(&self, class: usize) -> Option<&Matrix> {
        self.hc[class].as_ref()
    }

    pub(crate) fn set_hc(&mut self, class: usize, value: Matrix) {
        self.hc[class] = Some(value);
        self.staleness[class] = 0;
    }

    /// Error unless every class has a representative (required before any
    /// evaluation pass, which must pseudo-label against all classes).
    pub fn require_all_hc(&self) -> Result<()> {
        let missing: Vec<usize> = (0..self.hc.len())
            .filter(|&i| self.hc[i].is_none())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CareError::config(format!(
                "classes {missing:?} have no representative yet (never seen in training); cannot evaluate"
            )))
        }
    }

    /// Hash of all bits (bags, representatives, counters) for freeze checks.
    pub fn state_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.dim.hash(&mut h);
        for bag in &self.bags {
            bag.len().hash(&mut h);
            for m in bag {
                for v in m.as_slice() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        for hc in &self.hc {
            match hc {
                None => 0u8.hash(&mut h),
                Some(m) => {
                    1u8.hash(&mut h);
                    for v in m.as_slice() {
                        v.to_bits().hash(&mut h);
                    }
                }
            }
        }
        self.staleness.hash(&mut h);
        h.finish()
    }

    /// Inspection snapshot (JSON-serializable).
    pub fn export(&self) -> ClassStateExport {
        ClassStateExport {
            class_count: self.bags.len(),
            dim: self.dim,
            classes: (0..self.bags.len())
                .map(|i| ClassEntry {
                    class: i,
                    bag_len: self.bags[i].len(),
                    staleness: self.staleness[i],
                    hc: self.hc[i].as_ref().map(|m| m.as_slice().to_vec()),
                })
                .collect(),
        }
    }
}

/// JSON snapshot of a [`ClassState`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassStateExport {
    pub class_count: usize,
    pub dim: usize,
    pub classes: Vec<ClassEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: usize,
    pub bag_len: usize,
    pub staleness: u64,
    pub hc: Option<Vec<f64>>,
}

/// Parameter ids for one refinement site: the set encoder ρ (m -> m, one
/// hidden ReLU layer), the Trans MLP (2m -> m, one hidden ReLU layer), and —
/// when the site pools — the selector's score column.
#[derive(Clone, Debug)]
pub struct RefinerSite {
    pub rho_w1: ParamId,
    pub rho_b1: ParamId,
    pub rho_w2: ParamId,
    pub rho_b2: ParamId,
    pub trans_w1: ParamId,
    pub trans_b1: ParamId,
    pub trans_w2: ParamId,
    pub trans_b2: ParamId,
    pub score_w: Option<ParamId>,
}

impl RefinerSite {
    /// Register all site parameters under `prefix`. `m` is the embedding
    /// width at this site; `h` the node-embedding width the selector scores
    /// (equal to `m` everywhere in this crate, passed separately for
    /// clarity).
    pub fn new(
        m: usize,
        h: usize,
        prefix: &str,
        selector_kind: SelectorKind,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = |part: &str| format!("{prefix}.{part}");
        let score_w = match selector_kind {
            SelectorKind::Sagpool => {
                Some(store.register_uniform(&name("score.w"), h, 1, h, rng)?)
            }
            SelectorKind::None => None,
        };
        Ok(RefinerSite {
            rho_w1: store.register_uniform(&name("rho.w1"), m, m, m, rng)?,
            rho_b1: store.register_uniform(&name("rho.b1"), 1, m, m, rng)?,
            rho_w2: store.register_uniform(&name("rho.w2"), m, m, m, rng)?,
            rho_b2: store.register_uniform(&name("rho.b2"), 1, m, m, rng)?,
            trans_w1: store.register_uniform(&name("trans.w1"), 2 * m, m, 2 * m, rng)?,
            trans_b1: store.register_uniform(&name("trans.b1"), 1, m, 2 * m, rng)?,
            trans_w2: store.register_uniform(&name("trans.w2"), m, m, m, rng)?,
            trans_b2: store.register_uniform(&name("trans.b2"), 1, m, m, rng)?,
            score_w,
        })
    }

    /// The set encoder ρ: one hidden ReLU layer, widths m -> m -> m.
    fn rho(&self, tape: &mut Tape, leafed: &[Tensor], x: Tensor) -> Result<Tensor> {
        let l1 = tape.matmul(x, leafed[self.rho_w1.index()])?;
        let l1b = tape.add_row_bias(l1, leafed[self.rho_b1.index()])?;
        let hid = tape.relu(l1b);
        let l2 = tape.matmul(hid, leafed[self.rho_w2.index()])?;
        tape.add_row_bias(l2, leafed[self.rho_b2.index()])
    }
}

/// Refinement (the Trans MLP): `hg' = Trans([hg | hc])`, one hidden ReLU
/// layer, widths 2m -> m -> m. Differentiable through both inputs.
pub fn refine(
    tape: &mut Tape,
    site: &RefinerSite,
    leafed: &[Tensor],
    hg: Tensor,
    hc: Tensor,
) -> Result<Tensor> {
    let cat = tape.concat_cols(hg, hc)?;
    let l1 = tape.matmul(cat, leafed[site.trans_w1.index()])?;
    let l1b = tape.add_row_bias(l1, leafed[site.trans_b1.index()])?;
    let hid = tape.relu(l1b);
    let l2 = tape.matmul(hid, leafed[site.trans_w2.index()])?;
    tape.add_row_bias(l2, leafed[site.trans_b2.index()])
}

/// Compute (and cache) the class representative `hc_i = ρ(mean of bag)`.
///
/// With `live_rep` given (training), the newest bag member — the detached
/// copy of the current graph — is replaced by the live tensor inside the
/// mean, so the gradient path `hc -> ρ -> hg_sub -> encoder` stays intact.
/// Without it, the mean is over detached members only. The freshly computed
/// value is cached into the state for later frozen lookups.
pub fn class_representation(
    tape: &mut Tape,
    site: &RefinerSite,
    leafed: &[Tensor],
    state: &mut ClassState,
    class: usize,
    live_rep: Option<Tensor>,
) -> Result<Tensor> {
    let bag_len = state.bag_len(class);
    let mean = match live_rep {
        Some(live) => {
            if live.rows() != 1 || live.cols() != state.dim() {
                return Err(CareError::contract(
                    "class_representation",
                    format!(
                        "live representation is {}x{}, state dimension is {}",
                        live.rows(),
                        live.cols(),
                        state.dim()
                    ),
                ));
            }
            let n = bag_len.max(1);
            let rest = tape.constant(&state.sum_excluding_newest(class));
            let sum = tape.add(rest, live)?;
            tape.scale(sum, 1.0 / n as f64)
        }
        None => {
            if bag_len == 0 {
                return Err(CareError::config(format!(
                    "class {class} has an empty bag and no live representation (cold start)"
                )));
            }
            let sum = tape.constant(&state.sum_all(class));
            tape.scale(sum, 1.0 / bag_len as f64)
        }
    };
    let hc = site.rho(tape, leafed, mean)?;
    state.set_hc(class, tape.value_matrix(hc));
    Ok(hc)
}

/// Cosine similarity on raw values with a zero-norm guard (either side zero
/// gives 0). Unlike the tape operator, no epsilon enters the quotient, so
/// the argmax in [`pseudo_label`] is exactly invariant to rescaling by
/// powers of two and stable under any positive rescaling away from ties.
fn cosine_plain(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(&x, &y)| x * y).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu > 0.0 && nv > 0.0 {
        dot / (nu * nv)
    } else {
        0.0
    }
}

/// Evaluation-time class guess: the class whose representative is most
/// cosine-similar to the subgraph representation; ties break to the lower
/// class index. Every class must have a representative.
pub fn pseudo_label(hg_sub: &[f64], state: &ClassState) -> Result<usize> {
    state.require_all_hc()?;
    let mut best = 0usize;
    let mut best_sim = f64::NEG_INFINITY;
    for class in 0..state.class_count() {
        let hc = state.hc(class).expect("checked by require_all_hc");
        let sim = cosine_plain(hg_sub, hc.as_slice());
        if sim > best_sim {
            best_sim = sim;
            best = class;
        }
    }
    Ok(best)
}

/// Everything one refinement step hands to the loss assembly.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// The refined graph representation `hg'`.
    pub refined: Tensor,
    /// The subgraph representation `readout(H_sub)`.
    pub hg_sub: Tensor,
    /// Ground-truth class in training, pseudo-label in evaluation.
    pub chosen_class: usize,
    /// The gradient-carrying class representative (training mode only).
    pub live_hc: Option<Tensor>,
}

/// One full refiner step on one graph at one site: select a subgraph, read
/// it out, and either (train) bag it, rebuild the class representative with
/// the live path, and refine, or (eval) pseudo-label against the frozen
/// representatives and refine with a constant lookup.
#[allow(clippy::too_many_arguments)]
pub fn refiner_training_step(
    tape: &mut Tape,
    site: &RefinerSite,
    leafed: &[Tensor],
    a_norm: Tensor,
    a_raw: &Matrix,
    h: Tensor,
    hg: Tensor,
    readout_mode: ReadoutMode,
    selector: &SelectorConfig,
    state: &mut ClassState,
    label: Option<usize>,
    mode: Mode,
) -> Result<StepOutput> {
    let selection: Selection = match (selector.kind, site.score_w) {
        (SelectorKind::Sagpool, Some(w)) => sagpool_select(
            tape,
            a_norm,
            a_raw,
            h,
            leafed[w.index()],
            selector.pooling_ratio,
        )?,
        (SelectorKind::None, _) => none_select(tape, a_raw, h)?,
        (SelectorKind::Sagpool, None) => {
            return Err(CareError::contract(
                "refiner_training_step",
                "sagpool selector requested but the site has no score weights",
            ))
        }
    };
    let hg_sub = readout(tape, selection.h_sub, readout_mode)?;

    match mode {
        Mode::Train => {
            let y = label.ok_or_else(|| {
                CareError::contract(
                    "refiner_training_step",
                    "training mode requires the ground-truth label",
                )
            })?;
            state.update_bag(y, tape.value_matrix(hg_sub), mode)?;
            let hc = class_representation(tape, site, leafed, state, y, Some(hg_sub))?;
            let refined = refine(tape, site, leafed, hg, hc)?;
            Ok(StepOutput {
                refined,
                hg_sub,
                chosen_class: y,
                live_hc: Some(hc),
            })
        }
        Mode::Eval => {
            let guess = pseudo_label(tape.value(hg_sub), state)?;
            let hc_const = state
                .hc(guess)
                .expect("pseudo_label verified all representatives")
                .clone();
            let hc = tape.constant(&hc_const);
            let refined = refine(tape, site, leafed, hg, hc)?;
            Ok(StepOutput {
                refined,
                hg_sub,
                chosen_class: guess,
                live_hc: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{check_gradients, GradCheckSettings, Reduce};
    use crate::graphio::normalize_adjacency;
    use rand::SeedableRng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn row(vals: &[f64]) -> Matrix {
        Matrix::from_vec(1, vals.len(), vals.to_vec()).unwrap()
    }

    /// A site whose ρ is the identity on nonnegative inputs (w1=w2=I, b=0)
    /// and whose Trans projects onto the first m columns.
    fn identity_site(m: usize, store: &mut ParamStore) -> RefinerSite {
        let eye = Matrix::identity(m);
        let zero_b = Matrix::zeros(1, m);
        let mut proj = Matrix::zeros(2 * m, m);
        for i in 0..m {
            proj.set(i, i, 1.0);
        }
        RefinerSite {
            rho_w1: store.register("t.rho.w1", eye.clone()).unwrap(),
            rho_b1: store.register("t.rho.b1", zero_b.clone()).unwrap(),
            rho_w2: store.register("t.rho.w2", eye.clone()).unwrap(),
            rho_b2: store.register("t.rho.b2", zero_b.clone()).unwrap(),
            trans_w1: store.register("t.trans.w1", proj).unwrap(),
            trans_b1: store.register("t.trans.b1", zero_b.clone()).unwrap(),
            trans_w2: store.register("t.trans.w2", eye).unwrap(),
            trans_b2: store.register("t.trans.b2", zero_b).unwrap(),
            score_w: None,
        }
    }

    #[test]
    fn bag_grows_then_rings() {
        let mut state = ClassState::new(2, 3, 4);
        for i in 0..4 {
            state
                .update_bag(0, row(&[i as f64, 0.0, 0.0]), Mode::Train)
                .unwrap();
        }
        assert_eq!(state.bag_len(0), 4);
        assert_eq!(state.bag_len(1), 0);
        // One more evicts the oldest (value 0).
        state.update_bag(0, row(&[9.0, 0.0, 0.0]), Mode::Train).unwrap();
        assert_eq!(state.bag_len(0), 4);
        let sum = state.sum_all(0);
        assert_eq!(sum.get(0, 0), 1.0 + 2.0 + 3.0 + 9.0);
    }

    #[test]
    fn bag_update_in_eval_mode_is_rejected() {
        let mut state = ClassState::new(1, 2, 4);
        let err = state.update_bag(0, row(&[1.0, 2.0]), Mode::Eval).unwrap_err();
        assert!(matches!(err, CareError::Contract { .. }));
    }

    #[test]
    fn class_representation_of_singleton_bag_is_the_member() {
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);
        let mut state = ClassState::new(1, 2, 8);
        state.update_bag(0, row(&[0.5, 2.0]), Mode::Train).unwrap();

        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let hc = class_representation(&mut tape, &site, &leafed, &mut state, 0, None).unwrap();
        assert_eq!(tape.value(hc), &[0.5, 2.0]);
        // Cached into the state.
        assert_eq!(state.hc(0).unwrap().as_slice(), &[0.5, 2.0]);
    }

    #[test]
    fn class_representation_is_the_bag_mean() {
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);
        let mut state = ClassState::new(1, 2, 8);
        state.update_bag(0, row(&[1.0, 0.0]), Mode::Train).unwrap();
        state.update_bag(0, row(&[3.0, 2.0]), Mode::Train).unwrap();

        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let hc = class_representation(&mut tape, &site, &leafed, &mut state, 0, None).unwrap();
        assert_eq!(tape.value(hc), &[2.0, 1.0]);
    }

    #[test]
    fn doubling_bag_members_doubles_identity_rho_mean() {
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);

        let members = [row(&[1.0, 2.0]), row(&[3.0, 0.0])];
        let run = |scale: f64| -> Vec<f64> {
            let mut state = ClassState::new(1, 2, 8);
            for m in &members {
                let mut scaled = m.clone();
                for v in scaled.as_mut_slice() {
                    *v *= scale;
                }
                state.update_bag(0, scaled, Mode::Train).unwrap();
            }
            let mut tape = Tape::new();
            let leafed = store.leaf_all(&mut tape);
            let hc =
                class_representation(&mut tape, &site, &leafed, &mut state, 0, None).unwrap();
            tape.value(hc).to_vec()
        };
        let base = run(1.0);
        let doubled = run(2.0);
        for (b, d) in base.iter().zip(&doubled) {
            assert!((2.0 * b - d).abs() < 1e-12);
        }
    }

    #[test]
    fn live_rep_replaces_its_detached_copy_in_the_mean() {
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);
        let mut state = ClassState::new(1, 2, 8);
        state.update_bag(0, row(&[4.0, 0.0]), Mode::Train).unwrap();
        // The "current graph": its detached copy enters the bag...
        state.update_bag(0, row(&[2.0, 2.0]), Mode::Train).unwrap();

        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        // ...and the live tensor (same values) substitutes for it.
        let live = tape.param(&row(&[2.0, 2.0]));
        let hc =
            class_representation(&mut tape, &site, &leafed, &mut state, 0, Some(live)).unwrap();
        assert_eq!(tape.value(hc), &[3.0, 1.0]);
        // Gradient flows into the live representation (identity ρ on
        // nonnegative inputs: d mean / d live = 1/|B|).
        let s = tape.reduce(hc, Reduce::SumAll);
        tape.backward(s).unwrap();
        let g = tape.grad_matrix(live);
        assert!((g.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cold_start_without_live_rep_errors() {
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);
        let mut state = ClassState::new(1, 2, 8);
        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let err = class_representation(&mut tape, &site, &leafed, &mut state, 0, None).unwrap_err();
        assert!(matches!(err, CareError::Config(_)));
    }

    #[test]
    fn bag_mean_is_order_invariant() {
        let mut store = ParamStore::new();
        let site = identity_site(3, &mut store);
        let members = [
            row(&[1.0, 0.0, 2.0]),
            row(&[0.0, 3.0, 1.0]),
            row(&[2.0, 1.0, 0.0]),
        ];
        let mut results = Vec::new();
        for order in [[0usize, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let mut state = ClassState::new(1, 3, 8);
            for &i in &order {
                state.update_bag(0, members[i].clone(), Mode::Train).unwrap();
            }
            let mut tape = Tape::new();
            let leafed = store.leaf_all(&mut tape);
            let hc =
                class_representation(&mut tape, &site, &leafed, &mut state, 0, None).unwrap();
            results.push(tape.value(hc).to_vec());
        }
        assert_eq!(results[0], results[1]);
        assert_eq!(results[0], results[2]);
    }

    #[test]
    fn refine_projection_hook_returns_relu_of_hg() {
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);
        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let hg = tape.constant(&row(&[1.5, -2.0]));
        let hc = tape.constant(&row(&[5.0, 6.0]));
        let out = refine(&mut tape, &site, &leafed, hg, hc).unwrap();
        // Projection keeps hg, hidden ReLU clips the negative, w2 = I.
        assert_eq!(tape.value(out), &[1.5, 0.0]);
    }

    #[test]
    fn refine_zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let zeros = |r, c| Matrix::zeros(r, c);
        let site = RefinerSite {
            rho_w1: store.register("z.rho.w1", zeros(2, 2)).unwrap(),
            rho_b1: store.register("z.rho.b1", zeros(1, 2)).unwrap(),
            rho_w2: store.register("z.rho.w2", zeros(2, 2)).unwrap(),
            rho_b2: store.register("z.rho.b2", zeros(1, 2)).unwrap(),
            trans_w1: store.register("z.trans.w1", zeros(4, 2)).unwrap(),
            trans_b1: store.register("z.trans.b1", zeros(1, 2)).unwrap(),
            trans_w2: store.register("z.trans.w2", zeros(2, 2)).unwrap(),
            trans_b2: store.register("z.trans.b2", zeros(1, 2)).unwrap(),
            score_w: None,
        };
        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let hg = tape.constant(&row(&[1.0, 2.0]));
        let hc = tape.constant(&row(&[3.0, 4.0]));
        let out = refine(&mut tape, &site, &leafed, hg, hc).unwrap();
        assert_eq!(tape.value(out), &[0.0, 0.0]);
    }

    #[test]
    fn refine_gradient_reaches_hc() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let site = RefinerSite::new(3, 3, "g", SelectorKind::None, &mut store, &mut rng).unwrap();
        let hg = row(&[0.4, -0.2, 0.9]);
        let hc0 = row(&[0.1, 0.7, -0.5]);
        let site_ref = &site;
        let store_ref = &store;
        let outcome = check_gradients(&[hc0], GradCheckSettings::default(), |tape, leaves| {
            let leafed = store_ref.leaf_all(tape);
            let hg_t = tape.constant(&hg);
            let out = refine(tape, site_ref, &leafed, hg_t, leaves[0])?;
            Ok(tape.reduce(out, Reduce::SumAll))
        })
        .unwrap();
        assert!(outcome.passed(), "worst: {}", outcome.worst);
        // And the analytic gradient is actually nonzero for generic weights.
        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let hg_t = tape.constant(&hg);
        let hc_t = tape.param(&row(&[0.1, 0.7, -0.5]));
        let out = refine(&mut tape, &site, &leafed, hg_t, hc_t).unwrap();
        let s = tape.reduce(out, Reduce::SumAll);
        tape.backward(s).unwrap();
        assert!(tape.grad_matrix(hc_t).norm_sq() > 0.0);
    }

    #[test]
    fn pseudo_label_picks_most_similar_representative() {
        let mut state = ClassState::new(3, 2, 8);
        state.set_hc(0, row(&[1.0, 0.0]));
        state.set_hc(1, row(&[0.0, 1.0]));
        state.set_hc(2, row(&[-1.0, -1.0]));

        // Exactly equal to hc_2: similarity 1 beats the others.
        assert_eq!(pseudo_label(&[-1.0, -1.0], &state).unwrap(), 2);
        // Orthogonal to hc_0, parallel to hc_1.
        assert_eq!(pseudo_label(&[0.0, 5.0], &state).unwrap(), 1);
    }

    #[test]
    fn pseudo_label_is_scale_invariant() {
        let mut state = ClassState::new(2, 3, 8);
        state.set_hc(0, row(&[1.0, 0.2, -0.3]));
        state.set_hc(1, row(&[-0.5, 0.9, 0.1]));
        let v = [0.3, 0.8, -0.1];
        let base = pseudo_label(&v, &state).unwrap();
        for scale in [0.5, 2.0, 512.0, 3.7, 1e-6, 1e6] {
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            assert_eq!(pseudo_label(&scaled, &state).unwrap(), base, "scale {scale}");
        }
    }

    #[test]
    fn pseudo_label_ties_break_low_and_missing_hc_errors() {
        let mut state = ClassState::new(2, 2, 8);
        state.set_hc(0, row(&[2.0, 0.0]));
        state.set_hc(1, row(&[1.0, 0.0]));
        // Both representatives are parallel: similarity ties at 1.
        assert_eq!(pseudo_label(&[3.0, 0.0], &state).unwrap(), 0);

        let incomplete = ClassState::new(2, 2, 8);
        assert!(matches!(
            pseudo_label(&[1.0, 0.0], &incomplete),
            Err(CareError::Config(_))
        ));
    }

    #[test]
    fn train_step_touches_only_its_class_and_eval_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut store = ParamStore::new();
        let site = RefinerSite::new(2, 2, "s", SelectorKind::Sagpool, &mut store, &mut rng).unwrap();
        let selector = SelectorConfig::new(SelectorKind::Sagpool, 0.5).unwrap();

        let a_raw = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let a_norm = normalize_adjacency(&a_raw).unwrap();
        let h_vals = mat(&[&[0.6, -0.1], &[0.2, 0.8]]);

        let mut state = ClassState::new(2, 2, 8);

        // Train on class 0.
        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let an = tape.constant(&a_norm);
        let ht = tape.constant(&h_vals);
        let hg = tape.mean_rows(ht);
        let out = refiner_training_step(
            &mut tape,
            &site,
            &leafed,
            an,
            &a_raw,
            ht,
            hg,
            ReadoutMode::Mean,
            &selector,
            &mut state,
            Some(0),
            Mode::Train,
        )
        .unwrap();
        assert_eq!(out.chosen_class, 0);
        assert!(out.live_hc.is_some());
        assert_eq!(state.bag_len(0), 1);
        assert_eq!(state.bag_len(1), 0);
        assert!(state.hc(0).is_some());
        assert!(state.hc(1).is_none());

        // Seed class 1 so evaluation can pseudo-label, then check purity.
        let mut tape2 = Tape::new();
        let leafed2 = store.leaf_all(&mut tape2);
        let an2 = tape2.constant(&a_norm);
        let ht2 = tape2.constant(&h_vals);
        let hg2 = tape2.mean_rows(ht2);
        refiner_training_step(
            &mut tape2,
            &site,
            &leafed2,
            an2,
            &a_raw,
            ht2,
            hg2,
            ReadoutMode::Mean,
            &selector,
            &mut state,
            Some(1),
            Mode::Train,
        )
        .unwrap();

        let before = state.state_hash();
        let mut tape3 = Tape::new();
        let leafed3 = store.leaf_all(&mut tape3);
        let an3 = tape3.constant(&a_norm);
        let ht3 = tape3.constant(&h_vals);
        let hg3 = tape3.mean_rows(ht3);
        let eval_out = refiner_training_step(
            &mut tape3,
            &site,
            &leafed3,
            an3,
            &a_raw,
            ht3,
            hg3,
            ReadoutMode::Mean,
            &selector,
            &mut state,
            None,
            Mode::Eval,
        )
        .unwrap();
        assert!(eval_out.live_hc.is_none());
        assert_eq!(state.state_hash(), before, "evaluation mutated class state");
    }

    #[test]
    fn full_step_matches_scripted_composition() {
        // Hand-script the composed equations on a 2-node graph with the
        // pass-through selector and identity hooks, then compare.
        let mut store = ParamStore::new();
        let site = identity_site(2, &mut store);
        let selector = SelectorConfig::new(SelectorKind::None, 1.0).unwrap();

        let a_raw = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let a_norm = normalize_adjacency(&a_raw).unwrap();
        let h_vals = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);

        let mut state = ClassState::new(1, 2, 8);
        // Pre-existing bag member from an earlier "graph".
        state.update_bag(0, row(&[2.0, 6.0]), Mode::Train).unwrap();

        let mut tape = Tape::new();
        let leafed = store.leaf_all(&mut tape);
        let an = tape.constant(&a_norm);
        let ht = tape.constant(&h_vals);
        let hg = tape.mean_rows(ht);
        let out = refiner_training_step(
            &mut tape,
            &site,
            &leafed,
            an,
            &a_raw,
            ht,
            hg,
            ReadoutMode::Mean,
            &selector,
            &mut state,
            Some(0),
            Mode::Train,
        )
        .unwrap();

        // Script: hg_sub = mean rows of H = [2,3]; bag = {[2,6],[2,3]};
        // hc = identity ρ of mean = [2,4.5]; refined = projection of
        // [hg | hc] = ReLU(hg) = [2,3].
        assert_eq!(tape.value(out.hg_sub), &[2.0, 3.0]);
        assert_eq!(state.hc(0).unwrap().as_slice(), &[2.0, 4.5]);
        assert_eq!(tape.value(out.refined), &[2.0, 3.0]);
    }
}
