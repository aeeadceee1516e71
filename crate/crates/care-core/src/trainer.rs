//! End-to-end training: model assembly, the epoch loop, early stopping on
//! validation loss, and 10-fold cross-validation.
//!
//! A model is an encoder stack, an optional set of refinement sites (one
//! after the final layer for GCN/SAGE — the *global* wiring — or one per
//! layer for GIN — the *hierarchical* wiring), and a linear classification
//! head. With refinement disabled the model degenerates exactly to the
//! plain backbone classifier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, AdamState, Matrix, ParamId, ParamStore, Reduce, Tape, Tensor};
use crate::encoders::{readout, EncoderKind, EncoderStack, GraphTensors, PreparedGraph};
use crate::error::{CareError, Result};
use crate::graphio::{make_folds, Dataset, FoldIndices};
use crate::losses::{
    class_loss, inter_class_loss, intra_class_loss, l2_class_loss, l2_inter_class_loss,
    l2_intra_class_loss, total_loss, ClassLossMode, L2Norm, LossConfig, LossDesign,
};
use crate::refiner::{refiner_training_step, ClassState, Mode, RefinerSite, StepOutput};
use crate::selector::{SelectorConfig, SelectorKind};

/// Where refinement sites sit: once after the final readout, or one per
/// encoder layer with the refined representations summed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Global,
    Hierarchical,
}

impl Architecture {
    /// The wiring each backbone uses: per-layer readout backbones (GIN)
    /// refine hierarchically, the rest globally.
    pub fn default_for(kind: EncoderKind) -> Self {
        match kind {
            EncoderKind::Gin => Architecture::Hierarchical,
            EncoderKind::Gcn | EncoderKind::Sage => Architecture::Global,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Architecture::Global => "global",
            Architecture::Hierarchical => "hierarchical",
        }
    }
}

/// Full training configuration. `ModelConfig::for_backbone` fills in the
/// reference defaults: depth 4, hidden width 146, SAGPool at ratio 0.5,
/// λ1 = λ2 = 1, Adam at learning rate 1e-4, batch size 20, at most 1000
/// epochs with patience 25.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: EncoderKind,
    pub architecture: Architecture,
    pub depth: usize,
    pub hidden: usize,
    pub selector: SelectorKind,
    pub pooling_ratio: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub care_enabled: bool,
    /// Balance class proportions across folds. Off by default: folds are
    /// plain seeded shuffles of the graph indices.
    pub stratified_folds: bool,
    pub design: LossDesign,
    pub class_loss_mode: ClassLossMode,
    pub l2_norm: L2Norm,
    pub bag_capacity: usize,
}

impl ModelConfig {
    pub fn for_backbone(backbone: EncoderKind) -> Self {
        ModelConfig {
            backbone,
            architecture: Architecture::default_for(backbone),
            depth: 4,
            hidden: 146,
            selector: SelectorKind::Sagpool,
            pooling_ratio: 0.5,
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 1e-4,
            batch_size: 20,
            max_epochs: 1000,
            patience: 25,
            seed: 0,
            care_enabled: true,
            stratified_folds: false,
            design: LossDesign::Combine,
            class_loss_mode: ClassLossMode::Cosine,
            l2_norm: L2Norm::Mean,
            bag_capacity: crate::refiner::DEFAULT_BAG_CAPACITY,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            mode: self.class_loss_mode,
            design: self.design,
            l2_norm: self.l2_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wanted = Architecture::default_for(self.backbone);
        if self.architecture != wanted {
            return Err(CareError::config(format!(
                "backbone {} requires the {} architecture, got {}",
                self.backbone.as_str(),
                wanted.as_str(),
                self.architecture.as_str()
            )));
        }
        for (name, v) in [
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("bag_capacity", self.bag_capacity),
        ] {
            if v == 0 {
                return Err(CareError::config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CareError::config(format!(
                "learning rate must be finite and positive, got {}",
                self.lr
            )));
        }
        SelectorConfig::new(self.selector, self.pooling_ratio)?;
        if self.care_enabled {
            self.loss_config().validate()?;
        }
        Ok(())
    }

    fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            kind: self.selector,
            pooling_ratio: self.pooling_ratio,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_backbone(EncoderKind::Gcn)
    }
}

/// One graph's forward products.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Class scores, shape 1 × class count.
    pub logits: Tensor,
    /// The vector fed to the head: the refined representation (or their
    /// per-layer sum), or the plain readout when refinement is off.
    pub head_input: Tensor,
    /// Per-site refiner products, empty when refinement is off.
    pub sites: Vec<StepOutput>,
}

/// Encoder + refinement sites + linear head, plus the per-site class state.
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub states: Vec<ClassState>,
    encoder: EncoderStack,
    sites: Vec<RefinerSite>,
    head_w: ParamId,
    head_b: ParamId,
    class_count: usize,
    feature_dim: usize,
}

impl Model {
    pub fn new(
        config: &ModelConfig,
        class_count: usize,
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if class_count < 2 {
            return Err(CareError::config(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        let mut params = ParamStore::new();
        let encoder = EncoderStack::new(
            config.backbone,
            config.depth,
            feature_dim,
            config.hidden,
            "enc",
            &mut params,
            rng,
        )?;
        let mut sites = Vec::new();
        let mut states = Vec::new();
        if config.care_enabled {
            let site_count = match config.architecture {
                Architecture::Global => 1,
                Architecture::Hierarchical => config.depth,
            };
            for s in 0..site_count {
                let prefix = match config.architecture {
                    Architecture::Global => "refine".to_string(),
                    Architecture::Hierarchical => format!("refine.l{s}"),
                };
                sites.push(RefinerSite::new(
                    config.hidden,
                    config.hidden,
                    &prefix,
                    config.selector,
                    &mut params,
                    rng,
                )?);
                states.push(ClassState::new(
                    class_count,
                    config.hidden,
                    config.bag_capacity,
                ));
            }
        }
        let head_w = params.register_uniform(
            "head.w",
            config.hidden,
            class_count,
            config.hidden,
            rng,
        )?;
        let head_b =
            params.register_uniform("head.b", 1, class_count, config.hidden, rng)?;
        Ok(Model {
            config: config.clone(),
            params,
            states,
            encoder,
            sites,
            head_w,
            head_b,
            class_count,
            feature_dim,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    /// Combined fingerprint of weights and class state, for purity checks.
    pub fn state_fingerprint(&self) -> u64 {
        let mut h = self.params.state_hash();
        for s in &self.states {
            h = h.rotate_left(13) ^ s.state_hash();
        }
        h
    }

    /// One graph through the configured pipeline. `leafed` must come from
    /// `self.params.leaf_all` on the same tape. Training mode updates the
    /// class bags; evaluation mode leaves all state untouched.
    pub fn forward_graph(
        &mut self,
        tape: &mut Tape,
        leafed: &[Tensor],
        graph: &PreparedGraph,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        if graph.features.cols() != self.feature_dim {
            return Err(CareError::contract(
                "forward_graph",
                format!(
                    "graph features have width {}, model expects {}",
                    graph.features.cols(),
                    self.feature_dim
                ),
            ));
        }
        let gt = GraphTensors::register(tape, graph);
        let layer_outs = self.encoder.forward(tape, leafed, &gt)?;
        let readout_mode = self.encoder.readout_mode;
        let selector = self.config.selector_config();

        let mut sites_out = Vec::new();
        let head_input = if !self.config.care_enabled {
            match self.config.backbone {
                // Per-layer readouts summed: the standard GIN graph head.
                EncoderKind::Gin => {
                    let mut acc: Option<Tensor> = None;
                    for &h in &layer_outs {
                        let hg = readout(tape, h, readout_mode)?;
                        acc = Some(match acc {
                            None => hg,
                            Some(a) => tape.add(a, hg)?,
                        });
                    }
                    acc.expect("encoder depth is at least 1")
                }
                _ => {
                    let last = *layer_outs.last().expect("encoder depth is at least 1");
                    readout(tape, last, readout_mode)?
                }
            }
        } else {
            match self.config.architecture {
                Architecture::Global => {
                    let last = *layer_outs.last().expect("encoder depth is at least 1");
                    let hg = readout(tape, last, readout_mode)?;
                    let step = refiner_training_step(
                        tape,
                        &self.sites[0],
                        leafed,
                        gt.a_norm,
                        &graph.a_raw,
                        last,
                        hg,
                        readout_mode,
                        &selector,
                        &mut self.states[0],
                        Some(graph.label),
                        mode,
                    )?;
                    let refined = step.refined;
                    sites_out.push(step);
                    refined
                }
                Architecture::Hierarchical => {
                    let mut acc: Option<Tensor> = None;
                    for (l, &h) in layer_outs.iter().enumerate() {
                        let hg = readout(tape, h, readout_mode)?;
                        let step = refiner_training_step(
                            tape,
                            &self.sites[l],
                            leafed,
                            gt.a_norm,
                            &graph.a_raw,
                            h,
                            hg,
                            readout_mode,
                            &selector,
                            &mut self.states[l],
                            Some(graph.label),
                            mode,
                        )?;
                        acc = Some(match acc {
                            None => step.refined,
                            Some(a) => tape.add(a, step.refined)?,
                        });
                        sites_out.push(step);
                    }
                    acc.expect("encoder depth is at least 1")
                }
            }
        };

        let lin = tape.matmul(head_input, leafed[self.head_w.index()])?;
        let logits = tape.add_row_bias(lin, leafed[self.head_b.index()])?;
        Ok(ForwardOutput {
            logits,
            head_input,
            sites: sites_out,
        })
    }
}

/// Argmax over a score row; ties break to the lower index.
pub fn argmax_row(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class-loss pieces of one batch, averaged across refinement sites.
struct BatchClassParts {
    intra: Option<Tensor>,
    inter: Option<Tensor>,
    class_loss: Option<Tensor>,
    degenerate: bool,
}

/// Compute the class-loss components over every site (each site's term is
/// built from its own items and representatives, then the site values are
/// averaged), and the batch total per the configured design.
fn batch_class_parts(
    tape: &mut Tape,
    cfg: &LossConfig,
    site_items: &[Vec<(Tensor, usize)>],
    site_hcs: &[Vec<Option<Tensor>>],
) -> Result<BatchClassParts> {
    if cfg.mode == ClassLossMode::Off || site_items.is_empty() {
        return Ok(BatchClassParts {
            intra: None,
            inter: None,
            class_loss: None,
            degenerate: false,
        });
    }
    let mut intras = Vec::with_capacity(site_items.len());
    let mut inters = Vec::with_capacity(site_items.len());
    let mut degenerate = false;
    for (items, hcs) in site_items.iter().zip(site_hcs) {
        match cfg.mode {
            ClassLossMode::Cosine => {
                intras.push(intra_class_loss(tape, items, hcs)?);
                let inter = inter_class_loss(tape, hcs)?;
                degenerate |= inter.degenerate;
                inters.push(inter.value);
            }
            ClassLossMode::L2 => {
                intras.push(l2_intra_class_loss(tape, items, hcs, cfg.l2_norm)?);
                let inter = l2_inter_class_loss(tape, hcs, cfg.l2_norm)?;
                degenerate |= inter.degenerate;
                inters.push(inter.value);
            }
            ClassLossMode::Off => unreachable!("handled above"),
        }
    }
    let mean_scalars = |tape: &mut Tape, xs: &[Tensor]| -> Result<Tensor> {
        let stacked = tape.stack_scalars(xs)?;
        Ok(tape.reduce(stacked, Reduce::MeanAll))
    };
    let intra = mean_scalars(tape, &intras)?;
    let inter = mean_scalars(tape, &inters)?;
    let combined = match cfg.mode {
        ClassLossMode::Cosine => class_loss(tape, intra, inter, cfg.lambda1)?,
        ClassLossMode::L2 => l2_class_loss(tape, intra, inter)?,
        ClassLossMode::Off => unreachable!("handled above"),
    };
    Ok(BatchClassParts {
        intra: Some(intra),
        inter: Some(inter),
        class_loss: Some(combined),
        degenerate,
    })
}

/// Aggregate statistics of one training epoch. Loss figures are per-graph
/// weighted means across the epoch's batches; component figures are 0 when
/// the configuration does not produce them.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub l_cls: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_class: f64,
    pub batches: usize,
    /// Batches whose inter-class term degenerated to 0 (fewer than two
    /// classes had representatives yet).
    pub degenerate_batches: usize,
}

/// One epoch: visit the training graphs in shuffled order, in batches of
/// `config.batch_size`; per batch, average the per-graph cross-entropy, add
/// the class loss per the design, and take one Adam step.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    prepared: &[PreparedGraph],
    train_idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if train_idx.is_empty() {
        return Err(CareError::contract("train_epoch", "empty training set"));
    }
    let mut order = train_idx.to_vec();
    order.shuffle(rng);
    let loss_cfg = model.config.loss_config();
    let class_count = model.class_count;
    let care = model.config.care_enabled;

    let mut stats = EpochStats::default();
    let mut correct = 0usize;
    let total = order.len() as f64;

    for chunk in order.chunks(model.config.batch_size) {
        let mut tape = Tape::new();
        let leafed = model.params.leaf_all(&mut tape);
        let mut ces = Vec::with_capacity(chunk.len());
        let site_count = model.sites.len();
        let mut site_items: Vec<Vec<(Tensor, usize)>> = vec![Vec::new(); site_count];
        let mut site_live: Vec<Vec<Option<Tensor>>> =
            vec![vec![None; class_count]; site_count];

        for &i in chunk {
            let graph = &prepared[i];
            let out = model.forward_graph(&mut tape, &leafed, graph, Mode::Train)?;
            let ce = tape.softmax_cross_entropy(out.logits, graph.label)?;
            ces.push(ce);
            if argmax_row(tape.value(out.logits)) == graph.label {
                correct += 1;
            }
            for (s, step) in out.sites.iter().enumerate() {
                site_items[s].push((step.hg_sub, graph.label));
                site_live[s][step.chosen_class] = step.live_hc;
            }
        }

        let stacked = tape.stack_scalars(&ces)?;
        let l_cls = tape.reduce(stacked, Reduce::MeanAll);

        // Representatives for the loss: the batch's live tensors where a
        // class was just refreshed, cached constants elsewhere.
        let mut site_hcs: Vec<Vec<Option<Tensor>>> = Vec::with_capacity(site_count);
        for (s, live) in site_live.iter().enumerate() {
            let mut hcs = Vec::with_capacity(class_count);
            for (c, live_hc) in live.iter().enumerate() {
                hcs.push(match live_hc {
                    Some(t) => Some(*t),
                    None => model.states[s].hc(c).map(|m| tape.constant(m)),
                });
            }
            site_hcs.push(hcs);
        }

        let parts = if care {
            batch_class_parts(&mut tape, &loss_cfg, &site_items, &site_hcs)?
        } else {
            BatchClassParts {
                intra: None,
                inter: None,
                class_loss: None,
                degenerate: false,
            }
        };
        let class_term = match loss_cfg.design {
            LossDesign::Cls | LossDesign::Combine => parts.class_loss,
            LossDesign::Intra => match parts.intra {
                Some(t) => Some(tape.exp(t)),
                None => None,
            },
            LossDesign::Inter => match parts.inter {
                Some(t) => Some(tape.exp(t)),
                None => None,
            },
        };
        let total_t = if care && class_term.is_some() {
            total_loss(&mut tape, l_cls, class_term, loss_cfg.lambda2, loss_cfg.design)?
        } else {
            l_cls
        };

        tape.backward(total_t)?;
        let grads: Vec<Matrix> = leafed.iter().map(|&t| tape.grad_matrix(t)).collect();
        adam.step(&mut model.params, &grads)?;

        let k = chunk.len() as f64;
        stats.train_loss += tape.scalar_value(total_t)? * k;
        stats.l_cls += tape.scalar_value(l_cls)? * k;
        if let Some(t) = parts.intra {
            stats.l_intra += tape.scalar_value(t)? * k;
        }
        if let Some(t) = parts.inter {
            stats.l_inter += tape.scalar_value(t)? * k;
        }
        if let Some(t) = parts.class_loss {
            stats.l_class += tape.scalar_value(t)? * k;
        }
        stats.batches += 1;
        if parts.degenerate {
            stats.degenerate_batches += 1;
        }
    }

    stats.train_loss /= total;
    stats.l_cls /= total;
    stats.l_intra /= total;
    stats.l_inter /= total;
    stats.l_class /= total;
    stats.train_accuracy = correct as f64 / total;
    if !stats.train_loss.is_finite() {
        return Err(CareError::numeric(format!(
            "training loss became non-finite ({})",
            stats.train_loss
        )));
    }
    Ok(stats)
}

/// Accuracy and mean cross-entropy over an index set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Evaluate without touching any state: refinement runs on the pseudo-label
/// path against frozen class representatives, and the reported loss is the
/// classification term only.
pub fn evaluate(
    model: &mut Model,
    prepared: &[PreparedGraph],
    indices: &[usize],
) -> Result<EvalOutcome> {
    if indices.is_empty() {
        return Err(CareError::contract("evaluate", "empty index set"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for &i in indices {
        let mut tape = Tape::new();
        let leafed = model.params.leaf_all(&mut tape);
        let graph = &prepared[i];
        let out = model.forward_graph(&mut tape, &leafed, graph, Mode::Eval)?;
        let ce = tape.softmax_cross_entropy(out.logits, graph.label)?;
        loss_sum += tape.scalar_value(ce)?;
        if argmax_row(tape.value(out.logits)) == graph.label {
            correct += 1;
        }
    }
    let n = indices.len() as f64;
    Ok(EvalOutcome {
        accuracy: correct as f64 / n,
        mean_loss: loss_sum / n,
    })
}

/// One graph's final representation for the embedding dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: usize,
    pub label: usize,
    pub values: Vec<f64>,
}

/// Evaluation-mode head inputs (the refined representation, or the plain
/// readout for a baseline) for every index, e.g. for separability metrics.
pub fn dump_embeddings(
    model: &mut Model,
    prepared: &[PreparedGraph],
    indices: &[usize],
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut tape = Tape::new();
        let leafed = model.params.leaf_all(&mut tape);
        let graph = &prepared[i];
        let out = model.forward_graph(&mut tape, &leafed, graph, Mode::Eval)?;
        rows.push(EmbeddingRow {
            id: i,
            label: graph.label,
            values: tape.value(out.head_input).to_vec(),
        });
    }
    Ok(rows)
}

/// What an early-stopping observation decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    /// New best validation loss — snapshot the model.
    Improved,
    /// No improvement, keep training.
    Continue,
    /// Patience exhausted — stop after this epoch.
    Stop,
}

/// Strict-improvement early stopping: training stops once `patience` epochs
/// pass without the validation loss dropping below its best value, i.e. at
/// epoch `best_epoch + patience`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

/// One epoch's row in the per-fold trace CSV.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

/// One epoch's loss components.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ComponentsRow {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_class: f64,
    pub l_total: f64,
}

/// Everything one fold produced.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub trace: Vec<EpochTrace>,
    pub components: Vec<ComponentsRow>,
    /// Evaluation-mode embeddings of the fold's training graphs under the
    /// restored best weights.
    pub embeddings: Vec<EmbeddingRow>,
}

/// Cross-validation summary. Wall time is measured but excluded from the
/// serialized form so identical runs serialize byte-identically; callers
/// that want it persist it separately.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub backbone: String,
    pub architecture: String,
    pub care_enabled: bool,
    pub seed: u64,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub epochs_to_stop: Vec<usize>,
    pub mean_epochs_to_stop: f64,
    pub std_epochs_to_stop: f64,
    pub traces: Vec<Vec<EpochTrace>>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// A [`RunResult`] plus the per-fold details that live in side files
/// (loss components, embedding dumps).
#[derive(Clone, Debug)]
pub struct CvOutput {
    pub result: RunResult,
    pub folds: Vec<FoldOutcome>,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train one fold to early stop, restore the best-validation checkpoint,
/// and measure test accuracy.
pub fn run_fold(
    prepared: &[PreparedGraph],
    class_count: usize,
    feature_dim: usize,
    fold: &FoldIndices,
    config: &ModelConfig,
) -> Result<FoldOutcome> {
    let mut rng = fold_rng(config.seed, fold.fold);
    let mut model = Model::new(config, class_count, feature_dim, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best: Option<(ParamStore, Vec<ClassState>)> = None;

    let mut trace = Vec::new();
    let mut components = Vec::new();
    let mut stop_epoch = 0;
    for epoch in 1..=config.max_epochs {
        let stats = train_epoch(&mut model, &mut adam, prepared, &fold.train, &mut rng)?;
        let val = evaluate(&mut model, prepared, &fold.val)?;
        trace.push(EpochTrace {
            epoch,
            train_loss: stats.train_loss,
            val_loss: val.mean_loss,
            train_acc: stats.train_accuracy,
            val_acc: val.accuracy,
        });
        components.push(ComponentsRow {
            epoch,
            l_cls: stats.l_cls,
            l_intra: stats.l_intra,
            l_inter: stats.l_inter,
            l_class: stats.l_class,
            l_total: stats.train_loss,
        });
        stop_epoch = epoch;
        match stopper.observe(epoch, val.mean_loss) {
            StopDecision::Improved => {
                best = Some((model.params.clone(), model.states.clone()));
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    let (best_params, best_states) =
        best.expect("at least one epoch ran, and the first observation improves on +inf");
    model.params.restore_from(&best_params)?;
    model.states = best_states;

    let test = evaluate(&mut model, prepared, &fold.test)?;
    let embeddings = dump_embeddings(&mut model, prepared, &fold.train)?;
    Ok(FoldOutcome {
        fold: fold.fold,
        test_accuracy: test.accuracy,
        best_epoch: stopper.best_epoch(),
        stop_epoch,
        trace,
        components,
        embeddings,
    })
}

fn with_fold_context(fold: usize, e: CareError) -> CareError {
    match e {
        CareError::Config(m) => CareError::Config(format!("fold {fold}: {m}")),
        CareError::Numeric(m) => CareError::Numeric(format!("fold {fold}: {m}")),
        other => other,
    }
}

/// 10-fold cross-validation: folds shuffled from the run seed (optionally
/// class-stratified), one fresh model and class state per fold (folds run
/// in parallel), aggregated as mean ± population standard deviation over
/// fold test accuracies.
pub fn run_cv(dataset: &Dataset, config: &ModelConfig) -> Result<CvOutput> {
    config.validate()?;
    let started = Instant::now();
    let prepared: Vec<PreparedGraph> = dataset
        .graphs
        .iter()
        .map(PreparedGraph::from_record)
        .collect::<Result<_>>()?;
    let plan = make_folds(dataset, config.seed, config.stratified_folds)?;

    let folds: Vec<FoldOutcome> = plan
        .folds
        .par_iter()
        .map(|fold| {
            run_fold(
                &prepared,
                dataset.class_count,
                dataset.feature_dim,
                fold,
                config,
            )
            .map_err(|e| with_fold_context(fold.fold, e))
        })
        .collect::<Result<_>>()?;

    let accs: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let epochs: Vec<usize> = folds.iter().map(|f| f.stop_epoch).collect();
    let epochs_f: Vec<f64> = epochs.iter().map(|&e| e as f64).collect();
    let (mean_epochs, std_epochs) = mean_std(&epochs_f);

    let result = RunResult {
        backbone: config.backbone.as_str().to_string(),
        architecture: config.architecture.as_str().to_string(),
        care_enabled: config.care_enabled,
        seed: config.seed,
        fold_accuracies: accs,
        mean_accuracy,
        std_accuracy,
        epochs_to_stop: epochs,
        mean_epochs_to_stop: mean_epochs,
        std_epochs_to_stop: std_epochs,
        traces: folds.iter().map(|f| f.trace.clone()).collect(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(CvOutput { result, folds })
}

/// `epoch,train_loss,val_loss,train_acc,val_acc` rows.
pub fn trace_csv(rows: &[EpochTrace]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc
        ));
    }
    out
}

/// `epoch,l_cls,l_intra,l_inter,l_class,l_total` rows.
pub fn components_csv(rows: &[ComponentsRow]) -> String {
    let mut out = String::from("epoch,l_cls,l_intra,l_inter,l_class,l_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.l_cls, r.l_intra, r.l_inter, r.l_class, r.l_total
        ));
    }
    out
}

/// `id,label,e0..e{m-1}` rows.
pub fn embeddings_csv(rows: &[EmbeddingRow]) -> String {
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("id,label");
    for j in 0..width {
        out.push_str(&format!(",e{j}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.id, r.label));
        for v in &r.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
