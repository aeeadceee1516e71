//! Command implementations behind the `care` binary: configuration
//! ingestion with strict keys and defaulting, training runs with full
//! artifact output, separability metrics over embedding CSVs, the capacity
//! comparison, ablation grids, and dataset sanity reports.
//!
//! Every command is deterministic given identical inputs: outputs are
//! overwritten in place, and the resolved-config echo written next to the
//! results is sufficient to reproduce a run bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderKind;
use crate::error::{io_err, CareError, Result};
use crate::graphio::{parse_tudataset, Dataset, FeaturePolicy};
use crate::losses::{ClassLossMode, L2Norm, LossDesign};
use crate::selector::SelectorKind;
use crate::sepmetrics::{full_report, EmbeddingSet};
use crate::trainer::{
    components_csv, embeddings_csv, run_cv, trace_csv, Architecture, CvOutput, ModelConfig,
};
use crate::vcbound::{report_table, report_table_header, sweep, capacity_check};

/// Environment variable that overrides the configured run seed.
pub const SEED_ENV_VAR: &str = "CARE_SEED";

/// A run configuration file: dataset location plus any subset of the model
/// settings. Unknown keys are rejected; missing keys fall back to the
/// reference defaults for the chosen backbone.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset_dir: String,
    pub dataset_name: String,
    #[serde(default)]
    pub feature_policy: Option<FeaturePolicy>,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub backbone: Option<EncoderKind>,
    #[serde(default)]
    pub architecture: Option<Architecture>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub selector: Option<SelectorKind>,
    #[serde(default)]
    pub pooling_ratio: Option<f64>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub max_epochs: Option<usize>,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub care_enabled: Option<bool>,
    #[serde(default)]
    pub stratified_folds: Option<bool>,
    #[serde(default)]
    pub design: Option<LossDesign>,
    #[serde(default)]
    pub class_loss_mode: Option<ClassLossMode>,
    #[serde(default)]
    pub l2_norm: Option<L2Norm>,
    #[serde(default)]
    pub bag_capacity: Option<usize>,
}

impl RunConfigFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    /// Parse a configuration from JSON text; `origin` names the source in
    /// error messages.
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| CareError::config(format!("config {origin}: {e}")))
    }

    /// Fill every unset field with the backbone's defaults.
    pub fn resolve_model(&self) -> Result<ModelConfig> {
        let backbone = self.backbone.unwrap_or(EncoderKind::Gcn);
        let mut m = ModelConfig::for_backbone(backbone);
        if let Some(a) = self.architecture {
            m.architecture = a;
        }
        if let Some(v) = self.depth {
            m.depth = v;
        }
        if let Some(v) = self.hidden {
            m.hidden = v;
        }
        if let Some(v) = self.selector {
            m.selector = v;
        }
        if let Some(v) = self.pooling_ratio {
            m.pooling_ratio = v;
        }
        if let Some(v) = self.lambda1 {
            m.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            m.lambda2 = v;
        }
        if let Some(v) = self.lr {
            m.lr = v;
        }
        if let Some(v) = self.batch_size {
            m.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            m.max_epochs = v;
        }
        if let Some(v) = self.patience {
            m.patience = v;
        }
        if let Some(v) = self.seed {
            m.seed = v;
        }
        if let Some(v) = self.care_enabled {
            m.care_enabled = v;
        }
        if let Some(v) = self.stratified_folds {
            m.stratified_folds = v;
        }
        if let Some(v) = self.design {
            m.design = v;
        }
        if let Some(v) = self.class_loss_mode {
            m.class_loss_mode = v;
        }
        if let Some(v) = self.l2_norm {
            m.l2_norm = v;
        }
        if let Some(v) = self.bag_capacity {
            m.bag_capacity = v;
        }
        m.validate()?;
        Ok(m)
    }
}

/// Seed override from a raw environment value (`None` = variable unset).
/// Factored out of the environment read so it is testable.
pub fn override_seed(model: &mut ModelConfig, raw: Option<&str>) -> Result<()> {
    if let Some(s) = raw {
        let seed: u64 = s.trim().parse().map_err(|_| {
            CareError::config(format!(
                "{SEED_ENV_VAR} must be an unsigned integer, got {s:?}"
            ))
        })?;
        model.seed = seed;
    }
    Ok(())
}

/// Apply the `CARE_SEED` environment override, if set.
pub fn apply_seed_env(model: &mut ModelConfig) -> Result<()> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(v) => override_seed(model, Some(&v)),
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => Err(CareError::config(format!(
            "{SEED_ENV_VAR} is not valid unicode"
        ))),
    }
}

/// The fully resolved settings echoed into each run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub dataset_dir: String,
    pub dataset_name: String,
    pub feature_policy: FeaturePolicy,
    pub model: ModelConfig,
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, content).map_err(|e| io_err(path, e))
}

fn pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| CareError::numeric(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn load_dataset(dir: &str, name: &str, policy: Option<FeaturePolicy>) -> Result<Dataset> {
    parse_tudataset(Path::new(dir), name, policy)
}

/// Write one run's artifacts (resolved config, result, timing, per-fold
/// traces, components, and embedding dumps) under `out`.
fn write_run_outputs(out: &Path, echo: &ResolvedConfig, cv: &CvOutput) -> Result<()> {
    write_string(&out.join("config.resolved.json"), &pretty_json(echo)?)?;
    write_string(&out.join("result.json"), &pretty_json(&cv.result)?)?;
    let timing = serde_json::json!({ "wall_seconds": cv.result.wall_seconds });
    write_string(&out.join("timing.json"), &pretty_json(&timing)?)?;
    for fold in &cv.folds {
        let k = fold.fold;
        write_string(&out.join(format!("fold{k}_trace.csv")), &trace_csv(&fold.trace))?;
        write_string(
            &out.join(format!("fold{k}_components.csv")),
            &components_csv(&fold.components),
        )?;
        write_string(
            &out.join(format!("fold{k}_embeddings.csv")),
            &embeddings_csv(&fold.embeddings),
        )?;
    }
    Ok(())
}

fn resolve_out_dir(
    override_dir: Option<&Path>,
    config_dir: Option<&str>,
    default_name: &str,
) -> PathBuf {
    match (override_dir, config_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(s)) => PathBuf::from(s),
        (None, None) => PathBuf::from(default_name),
    }
}

/// `train`: run cross-validation per the config file and write all
/// artifacts. Returns the summary line.
pub fn cmd_train(config_path: &Path, out_override: Option<&Path>) -> Result<String> {
    let file = RunConfigFile::from_path(config_path)?;
    let mut model = file.resolve_model()?;
    apply_seed_env(&mut model)?;
    let dataset = load_dataset(&file.dataset_dir, &file.dataset_name, file.feature_policy)?;
    let echo = ResolvedConfig {
        dataset_dir: file.dataset_dir.clone(),
        dataset_name: file.dataset_name.clone(),
        feature_policy: dataset.feature_policy,
        model: model.clone(),
    };
    let out = resolve_out_dir(
        out_override,
        file.out_dir.as_deref(),
        &format!("{}-{}-run", file.dataset_name, model.backbone.as_str()),
    );
    let cv = run_cv(&dataset, &model)?;
    write_run_outputs(&out, &echo, &cv)?;
    Ok(format!(
        "{}: mean accuracy {:.4} ± {:.4} over {} folds ({} graphs); results in {}\n",
        file.dataset_name,
        cv.result.mean_accuracy,
        cv.result.std_accuracy,
        cv.result.fold_accuracies.len(),
        dataset.graphs.len(),
        out.display()
    ))
}

/// `metrics`: compute the four separability metrics of an embedding CSV.
/// Returns the metrics JSON; optionally writes it to `out`.
pub fn cmd_metrics(embeddings: &Path, out: Option<&Path>) -> Result<String> {
    let text = fs::read_to_string(embeddings).map_err(|e| io_err(embeddings, e))?;
    let set = EmbeddingSet::from_csv_str(&text, &embeddings.display().to_string())?;
    let report = full_report(&set)?;
    let json = pretty_json(&report)?;
    if let Some(path) = out {
        write_string(path, &json)?;
    }
    Ok(json)
}

/// `vcbound` at one grid point: the comparison table plus a verdict line.
pub fn cmd_vcbound(n: u64, h2: u64, d: u64) -> Result<String> {
    let r = capacity_check(n, h2, d)?;
    let mut out = report_table_header();
    out.push_str(&report_table(&r));
    out.push_str(&format!(
        "difference q1 - q2 = {:.6}; verdict: {}\n",
        r.difference,
        if r.verdict { "true" } else { "false" }
    ));
    Ok(out)
}

/// `vcbound --sweep`: exhaustive n ∈ [1,100] × h₂ ∈ [1,256] grid at the
/// given depth.
pub fn cmd_vcbound_sweep(d: u64) -> Result<String> {
    let s = sweep(100, 256, &[d])?;
    Ok(format!(
        "verdict: {} for all {} cells (depth {}, min difference {:.6})\n",
        if s.all_true { "true" } else { "false" },
        s.cells,
        d,
        s.min_difference
    ))
}

/// An ablation grid: any subset of these axes, crossed.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub lambda1: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda2: Option<Vec<f64>>,
    #[serde(default)]
    pub design: Option<Vec<LossDesign>>,
    #[serde(default)]
    pub selector: Option<Vec<SelectorKind>>,
    #[serde(default)]
    pub class_loss_mode: Option<Vec<ClassLossMode>>,
    #[serde(default)]
    pub depth: Option<Vec<usize>>,
}

impl GridSpec {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CareError::config(format!("grid {}: {e}", path.display())))
    }

    /// Cross the provided axes over a base configuration. Deterministic
    /// order: lambda1, lambda2, design, selector, class_loss_mode, depth.
    pub fn expand(&self, base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
        for (name, empty) in [
            ("lambda1", self.lambda1.as_ref().is_some_and(|v| v.is_empty())),
            ("lambda2", self.lambda2.as_ref().is_some_and(|v| v.is_empty())),
            ("design", self.design.as_ref().is_some_and(|v| v.is_empty())),
            ("selector", self.selector.as_ref().is_some_and(|v| v.is_empty())),
            (
                "class_loss_mode",
                self.class_loss_mode.as_ref().is_some_and(|v| v.is_empty()),
            ),
            ("depth", self.depth.as_ref().is_some_and(|v| v.is_empty())),
        ] {
            if empty {
                return Err(CareError::config(format!(
                    "grid axis {name} is an empty list"
                )));
            }
        }
        let no_axes = self.lambda1.is_none()
            && self.lambda2.is_none()
            && self.design.is_none()
            && self.selector.is_none()
            && self.class_loss_mode.is_none()
            && self.depth.is_none();
        if no_axes {
            return Err(CareError::config(
                "grid is empty: provide at least one axis".to_string(),
            ));
        }
        let mut cells: Vec<(String, ModelConfig)> = vec![(String::new(), base.clone())];
        fn grow<T: Clone>(
            cells: Vec<(String, ModelConfig)>,
            axis: Option<&Vec<T>>,
            name: &str,
            label: impl Fn(&T) -> String,
            apply: impl Fn(&mut ModelConfig, &T),
        ) -> Vec<(String, ModelConfig)> {
            let Some(values) = axis else { return cells };
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for (tag, cfg) in &cells {
                for v in values {
                    let mut c = cfg.clone();
                    apply(&mut c, v);
                    let piece = format!("{name}={}", label(v));
                    let tag = if tag.is_empty() {
                        piece
                    } else {
                        format!("{tag},{piece}")
                    };
                    next.push((tag, c));
                }
            }
            next
        }
        cells = grow(cells, self.lambda1.as_ref(), "lambda1", |v| v.to_string(), |c, v| {
            c.lambda1 = *v
        });
        cells = grow(cells, self.lambda2.as_ref(), "lambda2", |v| v.to_string(), |c, v| {
            c.lambda2 = *v
        });
        cells = grow(
            cells,
            self.design.as_ref(),
            "design",
            |v| v.as_str().to_string(),
            |c, v| c.design = *v,
        );
        cells = grow(
            cells,
            self.selector.as_ref(),
            "selector",
            |v| v.as_str().to_string(),
            |c, v| c.selector = *v,
        );
        cells = grow(
            cells,
            self.class_loss_mode.as_ref(),
            "class_loss_mode",
            |v| v.as_str().to_string(),
            |c, v| c.class_loss_mode = *v,
        );
        cells = grow(cells, self.depth.as_ref(), "depth", |v| v.to_string(), |c, v| {
            c.depth = *v
        });
        for (tag, cfg) in &cells {
            cfg.validate()
                .map_err(|e| CareError::config(format!("grid cell {tag}: {e}")))?;
        }
        Ok(cells)
    }
}

fn cell_dir_name(tag: &str) -> String {
    tag.replace(',', "_")
}

/// `ablate`: run every grid cell over the base config and rank cells by
/// mean accuracy (descending; ties by cell label). Returns the summary CSV.
pub fn cmd_ablate(
    config_path: &Path,
    grid_path: &Path,
    out_override: Option<&Path>,
) -> Result<String> {
    let file = RunConfigFile::from_path(config_path)?;
    let mut base = file.resolve_model()?;
    apply_seed_env(&mut base)?;
    let grid = GridSpec::from_path(grid_path)?;
    let cells = grid.expand(&base)?;
    let dataset = load_dataset(&file.dataset_dir, &file.dataset_name, file.feature_policy)?;
    let out_root = resolve_out_dir(
        out_override,
        file.out_dir.as_deref(),
        &format!("{}-ablation", file.dataset_name),
    );

    let mut rows: Vec<(String, f64, f64, f64)> = Vec::with_capacity(cells.len());
    for (tag, cfg) in &cells {
        let cv = run_cv(&dataset, cfg)
            .map_err(|e| CareError::config(format!("grid cell {tag}: {e}")))?;
        let echo = ResolvedConfig {
            dataset_dir: file.dataset_dir.clone(),
            dataset_name: file.dataset_name.clone(),
            feature_policy: dataset.feature_policy,
            model: cfg.clone(),
        };
        write_run_outputs(&out_root.join(cell_dir_name(tag)), &echo, &cv)?;
        rows.push((
            tag.clone(),
            cv.result.mean_accuracy,
            cv.result.std_accuracy,
            cv.result.mean_epochs_to_stop,
        ));
    }
    rows.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut csv = String::from("rank,cell,mean_accuracy,std_accuracy,mean_epochs\n");
    for (rank, (tag, mean, std, epochs)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{:?},{},{},{}\n",
            rank + 1,
            tag,
            mean,
            std,
            epochs
        ));
    }
    write_string(&out_root.join("summary.csv"), &csv)?;
    Ok(csv)
}

/// `parse`: dataset sanity report (graph/class counts, mean sizes, feature
/// setup) as an aligned table, or as JSON with `json = true`.
pub fn cmd_parse(
    dir: &Path,
    name: &str,
    policy: Option<FeaturePolicy>,
    json: bool,
) -> Result<String> {
    let dataset = parse_tudataset(dir, name, policy)?;
    let stats = dataset.stats();
    if json {
        return pretty_json(&stats);
    }
    let mut out = format!(
        "{:<16} {:>7} {:>8} {:>10} {:>10}\n",
        "dataset", "graphs", "classes", "avg nodes", "avg edges"
    );
    out.push_str(&format!(
        "{:<16} {:>7} {:>8} {:>10.2} {:>10.2}\n",
        stats.name, stats.graph_count, stats.class_count, stats.mean_nodes, stats.mean_edges
    ));
    out.push_str(&format!(
        "features: {} (dim {}); class histogram: {:?}\n",
        stats.feature_policy, stats.feature_dim, stats.class_histogram
    ));
    Ok(out)
}
