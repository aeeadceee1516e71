//! TUDataset-format ingestion: parsing, node features, adjacency
//! normalization, and deterministic cross-validation splits.
//!
//! The on-disk layout is the standard text convention: `DS_A.txt` holds
//! 1-indexed edge pairs, `DS_graph_indicator.txt` maps each node to its
//! graph, `DS_graph_labels.txt` holds one class label per graph, and
//! `DS_node_labels.txt` / `DS_node_attributes.txt` are optional per-node
//! extras. Separators may be commas or whitespace; CRLF is tolerated.

pub mod folds;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Matrix;
use crate::error::{io_err, CareError, Result};

pub use folds::{make_folds, make_folds_from_labels, FoldIndices, FoldPlan};

/// How node feature vectors are constructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePolicy {
    /// One-hot of the node label (requires `DS_node_labels.txt`); node
    /// attributes, when present, are appended to the one-hot block.
    OnehotLabel,
    /// One-hot of the node degree, dimension `max_degree + 1` capped at 64
    /// (larger degrees share the last bucket).
    DegreeOnehot,
    /// A single all-ones column.
    Constant,
}

impl FeaturePolicy {
    /// Policy used when the caller does not pick one: label one-hots when the
    /// dataset ships node labels, degree one-hots otherwise.
    pub fn default_for(has_node_labels: bool) -> Self {
        if has_node_labels {
            FeaturePolicy::OnehotLabel
        } else {
            FeaturePolicy::DegreeOnehot
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FeaturePolicy::OnehotLabel => "onehot_label",
            FeaturePolicy::DegreeOnehot => "degree_onehot",
            FeaturePolicy::Constant => "constant",
        }
    }
}

/// Largest feature dimension `degree_onehot` will produce.
pub const DEGREE_FEATURE_CAP: usize = 64;

/// One parsed graph: raw symmetric adjacency (zero diagonal — self-loops are
/// added only during normalization), node features, and a dense class label.
#[derive(Clone, Debug)]
pub struct GraphRecord {
    pub adjacency: Matrix,
    pub features: Matrix,
    pub label: usize,
}

impl GraphRecord {
    pub fn node_count(&self) -> usize {
        self.adjacency.rows()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        let n = self.adjacency.rows();
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency.get(i, j) != 0.0 {
                    count += 1;
                }
            }
        }
        count
    }
}

/// A parsed dataset: graphs plus the label/feature bookkeeping needed for
/// training, reporting, and re-serialization.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<GraphRecord>,
    pub class_count: usize,
    pub feature_dim: usize,
    /// Which feature policy produced `features` (surfaced in reports).
    pub feature_policy: FeaturePolicy,
    /// Dense 0-based node labels per graph, when the dataset ships them.
    pub node_labels: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    /// Graph labels in graph order.
    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    /// Per-class graph counts, indexed by dense label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for g in &self.graphs {
            hist[g.label] += 1;
        }
        hist
    }

    /// Summary statistics of the kind dataset tables report.
    pub fn stats(&self) -> DatasetStats {
        let graph_count = self.graphs.len();
        let total_nodes: usize = self.graphs.iter().map(GraphRecord::node_count).sum();
        let total_edges: usize = self.graphs.iter().map(GraphRecord::edge_count).sum();
        DatasetStats {
            name: self.name.clone(),
            graph_count,
            class_count: self.class_count,
            feature_dim: self.feature_dim,
            feature_policy: self.feature_policy.as_str().to_string(),
            mean_nodes: total_nodes as f64 / graph_count as f64,
            mean_edges: total_edges as f64 / graph_count as f64,
            class_histogram: self.class_histogram(),
        }
    }
}

/// Dataset summary (JSON-serializable for the CLI).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub graph_count: usize,
    pub class_count: usize,
    pub feature_dim: usize,
    pub feature_policy: String,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub class_histogram: Vec<usize>,
}

/// Non-empty lines of a text file with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> CareError {
    CareError::Format {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Split a line on commas and/or whitespace into integer tokens.
fn parse_int_tokens(path: &Path, line_no: usize, line: &str) -> Result<Vec<i64>> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<i64>()
                .map_err(|_| format_err(path, line_no, format!("expected an integer, got '{t}'")))
        })
        .collect()
}

fn parse_float_tokens(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| format_err(path, line_no, format!("expected a number, got '{t}'")))
        })
        .collect()
}

/// Parse a dataset directory laid out in the TUDataset text convention.
/// `policy` picks the feature construction; pass `None` to use
/// [`FeaturePolicy::default_for`] the dataset's node-label availability.
pub fn parse_tudataset(dir: &Path, name: &str, policy: Option<FeaturePolicy>) -> Result<Dataset> {
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));

    // --- graph indicator: node -> graph -------------------------------
    let ind_path = file("graph_indicator");
    let ind_lines = read_lines(&ind_path)?;
    let mut node_graph: Vec<usize> = Vec::with_capacity(ind_lines.len());
    for (line_no, line) in &ind_lines {
        let toks = parse_int_tokens(&ind_path, *line_no, line)?;
        if toks.len() != 1 || toks[0] < 1 {
            return Err(format_err(
                &ind_path,
                *line_no,
                "expected a single positive graph id",
            ));
        }
        node_graph.push(toks[0] as usize);
    }
    let node_total = node_graph.len();
    if node_total == 0 {
        return Err(format_err(&ind_path, 1, "dataset has no nodes"));
    }
    let graph_count = *node_graph.iter().max().expect("non-empty");

    // Global node id (1-based) -> (graph index, local node index).
    let mut graph_nodes: Vec<Vec<usize>> = vec![Vec::new(); graph_count];
    let mut local_index: Vec<(usize, usize)> = Vec::with_capacity(node_total);
    for (global, &g) in node_graph.iter().enumerate() {
        let gi = g - 1;
        local_index.push((gi, graph_nodes[gi].len()));
        graph_nodes[gi].push(global);
    }
    for (gi, nodes) in graph_nodes.iter().enumerate() {
        if nodes.is_empty() {
            return Err(format_err(
                &ind_path,
                ind_lines.last().map_or(1, |(n, _)| *n),
                format!("graph {} has no nodes", gi + 1),
            ));
        }
    }

    // --- graph labels --------------------------------------------------
    let lab_path = file("graph_labels");
    let lab_lines = read_lines(&lab_path)?;
    if lab_lines.len() != graph_count {
        return Err(format_err(
            &lab_path,
            lab_lines.len().max(1),
            format!(
                "{} labels for {} graphs",
                lab_lines.len(),
                graph_count
            ),
        ));
    }
    let mut raw_labels = Vec::with_capacity(graph_count);
    for (line_no, line) in &lab_lines {
        let toks = parse_int_tokens(&lab_path, *line_no, line)?;
        if toks.len() != 1 {
            return Err(format_err(&lab_path, *line_no, "expected a single label"));
        }
        raw_labels.push(toks[0]);
    }
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let label_map: BTreeMap<i64, usize> = distinct
        .iter()
        .enumerate()
        .map(|(dense, &raw)| (raw, dense))
        .collect();
    let class_count = label_map.len();
    let labels: Vec<usize> = raw_labels.iter().map(|r| label_map[r]).collect();

    // --- adjacency -----------------------------------------------------
    let a_path = file("A");
    let mut adjacency: Vec<Matrix> = graph_nodes
        .iter()
        .map(|nodes| Matrix::zeros(nodes.len(), nodes.len()))
        .collect();
    for (line_no, line) in read_lines(&a_path)? {
        let toks = parse_int_tokens(&a_path, line_no, &line)?;
        if toks.len() != 2 {
            return Err(format_err(&a_path, line_no, "expected an edge pair"));
        }
        let (u, v) = (toks[0], toks[1]);
        for &t in &[u, v] {
            if t < 1 || t as usize > node_total {
                return Err(format_err(
                    &a_path,
                    line_no,
                    format!("node id {t} out of range 1..={node_total}"),
                ));
            }
        }
        let (gu, lu) = local_index[u as usize - 1];
        let (gv, lv) = local_index[v as usize - 1];
        if gu != gv {
            return Err(format_err(
                &a_path,
                line_no,
                format!(
                    "edge {u}-{v} connects graph {} to graph {}",
                    gu + 1,
                    gv + 1
                ),
            ));
        }
        if lu == lv {
            continue; // self-loops are not stored; normalization adds its own
        }
        adjacency[gu].set(lu, lv, 1.0);
        adjacency[gu].set(lv, lu, 1.0);
    }

    // --- optional node labels ------------------------------------------
    let nl_path = file("node_labels");
    let node_labels: Option<Vec<Vec<usize>>> = if nl_path.exists() {
        let lines = read_lines(&nl_path)?;
        if lines.len() != node_total {
            return Err(format_err(
                &nl_path,
                lines.len().max(1),
                format!("{} node labels for {} nodes", lines.len(), node_total),
            ));
        }
        let mut raw = Vec::with_capacity(node_total);
        for (line_no, line) in &lines {
            let toks = parse_int_tokens(&nl_path, *line_no, line)?;
            if toks.len() != 1 {
                return Err(format_err(&nl_path, *line_no, "expected a single node label"));
            }
            raw.push(toks[0]);
        }
        let mut distinct: Vec<i64> = raw.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let map: BTreeMap<i64, usize> = distinct
            .iter()
            .enumerate()
            .map(|(dense, &r)| (r, dense))
            .collect();
        let mut per_graph: Vec<Vec<usize>> = graph_nodes
            .iter()
            .map(|nodes| Vec::with_capacity(nodes.len()))
            .collect();
        for (global, r) in raw.iter().enumerate() {
            let (gi, _) = local_index[global];
            per_graph[gi].push(map[r]);
        }
        Some(per_graph)
    } else {
        None
    };

    // --- optional node attributes --------------------------------------
    let na_path = file("node_attributes");
    let node_attrs: Option<Vec<Vec<f64>>> = if na_path.exists() {
        let lines = read_lines(&na_path)?;
        if lines.len() != node_total {
            return Err(format_err(
                &na_path,
                lines.len().max(1),
                format!("{} attribute rows for {} nodes", lines.len(), node_total),
            ));
        }
        let mut rows = Vec::with_capacity(node_total);
        let mut width = None;
        for (line_no, line) in &lines {
            let vals = parse_float_tokens(&na_path, *line_no, line)?;
            match width {
                None => width = Some(vals.len()),
                Some(w) if w != vals.len() => {
                    return Err(format_err(
                        &na_path,
                        *line_no,
                        format!("attribute row has {} values, expected {w}", vals.len()),
                    ))
                }
                _ => {}
            }
            rows.push(vals);
        }
        Some(rows)
    } else {
        None
    };

    // --- features --------------------------------------------------------
    let policy = policy.unwrap_or_else(|| FeaturePolicy::default_for(node_labels.is_some()));
    let features = build_features(
        &adjacency,
        node_labels.as_deref(),
        node_attrs.as_deref().map(|attrs| {
            // Regroup flat per-node attributes by graph, in local order.
            let mut per_graph: Vec<Vec<&[f64]>> = graph_nodes
                .iter()
                .map(|nodes| Vec::with_capacity(nodes.len()))
                .collect();
            for (global, row) in attrs.iter().enumerate() {
                let (gi, _) = local_index[global];
                per_graph[gi].push(row.as_slice());
            }
            per_graph
        }),
        policy,
    )?;

    let graphs: Vec<GraphRecord> = adjacency
        .into_iter()
        .zip(features)
        .zip(&labels)
        .map(|((adjacency, features), &label)| GraphRecord {
            adjacency,
            features,
            label,
        })
        .collect();

    let feature_dim = graphs[0].features.cols();
    Ok(Dataset {
        name: name.to_string(),
        graphs,
        class_count,
        feature_dim,
        feature_policy: policy,
        node_labels,
    })
}

/// Build per-graph feature matrices. `node_labels` must already be dense
/// 0-based; `node_attrs` (when given) holds one slice per node per graph.
fn build_features(
    adjacency: &[Matrix],
    node_labels: Option<&[Vec<usize>]>,
    node_attrs: Option<Vec<Vec<&[f64]>>>,
    policy: FeaturePolicy,
) -> Result<Vec<Matrix>> {
    match policy {
        FeaturePolicy::OnehotLabel => {
            let labels = node_labels.ok_or_else(|| {
                CareError::config(
                    "feature policy 'onehot_label' needs a node-label file, which this dataset does not have"
                        .to_string(),
                )
            })?;
            let label_dim = labels
                .iter()
                .flat_map(|g| g.iter())
                .max()
                .map_or(1, |&m| m + 1);
            let attr_dim = node_attrs
                .as_ref()
                .and_then(|a| a.iter().flat_map(|g| g.iter()).next())
                .map_or(0, |row| row.len());
            let dim = label_dim + attr_dim;
            let mut out = Vec::with_capacity(adjacency.len());
            for (gi, adj) in adjacency.iter().enumerate() {
                let n = adj.rows();
                let mut f = Matrix::zeros(n, dim);
                for v in 0..n {
                    f.set(v, labels[gi][v], 1.0);
                    if let Some(attrs) = &node_attrs {
                        for (j, &x) in attrs[gi][v].iter().enumerate() {
                            f.set(v, label_dim + j, x);
                        }
                    }
                }
                out.push(f);
            }
            Ok(out)
        }
        FeaturePolicy::DegreeOnehot => {
            let mut max_degree = 0usize;
            let degrees: Vec<Vec<usize>> = adjacency
                .iter()
                .map(|adj| {
                    (0..adj.rows())
                        .map(|v| {
                            let d = adj.row(v).iter().filter(|&&x| x != 0.0).count();
                            max_degree = max_degree.max(d);
                            d
                        })
                        .collect()
                })
                .collect();
            let dim = (max_degree + 1).min(DEGREE_FEATURE_CAP);
            let mut out = Vec::with_capacity(adjacency.len());
            for degs in &degrees {
                let mut f = Matrix::zeros(degs.len(), dim);
                for (v, &d) in degs.iter().enumerate() {
                    f.set(v, d.min(dim - 1), 1.0);
                }
                out.push(f);
            }
            Ok(out)
        }
        FeaturePolicy::Constant => Ok(adjacency
            .iter()
            .map(|adj| Matrix::ones(adj.rows(), 1))
            .collect()),
    }
}

/// Symmetric normalization with self-loops:
/// `D^{-1/2} (A + I) D^{-1/2}` where `D` is the degree matrix of `A + I`.
/// An isolated node's row becomes a bare self-loop entry of 1.
pub fn normalize_adjacency(adjacency: &Matrix) -> Result<Matrix> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(CareError::contract(
            "normalize_adjacency",
            format!("adjacency must be square, got {}x{}", n, adjacency.cols()),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacency.get(i, j) != adjacency.get(j, i) {
                return Err(CareError::contract(
                    "normalize_adjacency",
                    format!("adjacency is not symmetric at ({i},{j})"),
                ));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = 1.0 + adjacency.row(i).iter().sum::<f64>();
            1.0 / deg.sqrt()
        })
        .collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if a != 0.0 {
                out.set(i, j, a * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
            }
        }
    }
    Ok(out)
}

/// Row-normalized adjacency `D^{-1} A` (no self-loops): row `i` averages the
/// neighbors of node `i`; isolated nodes get an all-zero row.
pub fn neighbor_mean_operator(adjacency: &Matrix) -> Matrix {
    let n = adjacency.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let deg: f64 = adjacency.row(i).iter().sum();
        if deg > 0.0 {
            for j in 0..n {
                let a = adjacency.get(i, j);
                if a != 0.0 {
                    out.set(i, j, a / deg);
                }
            }
        }
    }
    out
}

/// Re-serialize a dataset to the same text layout that [`parse_tudataset`]
/// reads (each undirected edge written in both directions). Node labels are
/// written when the dataset has them; attribute files are not reproduced.
pub fn serialize_tudataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let file = |suffix: &str| dir.join(format!("{}_{suffix}.txt", dataset.name));

    let mut indicator = String::new();
    let mut edges = String::new();
    let mut labels = String::new();
    let mut node_labels = String::new();
    let mut offset = 0usize; // global id of the first node of the current graph
    for (gi, g) in dataset.graphs.iter().enumerate() {
        let n = g.node_count();
        for v in 0..n {
            indicator.push_str(&format!("{}\n", gi + 1));
            if let Some(nl) = &dataset.node_labels {
                node_labels.push_str(&format!("{}\n", nl[gi][v]));
            }
            for u in 0..n {
                if g.adjacency.get(v, u) != 0.0 {
                    edges.push_str(&format!("{}, {}\n", offset + v + 1, offset + u + 1));
                }
            }
        }
        labels.push_str(&format!("{}\n", g.label));
        offset += n;
    }

    fs::write(file("A"), edges).map_err(|e| io_err(&file("A"), e))?;
    fs::write(file("graph_indicator"), indicator)
        .map_err(|e| io_err(&file("graph_indicator"), e))?;
    fs::write(file("graph_labels"), labels).map_err(|e| io_err(&file("graph_labels"), e))?;
    if dataset.node_labels.is_some() {
        fs::write(file("node_labels"), node_labels)
            .map_err(|e| io_err(&file("node_labels"), e))?;
    }
    Ok(())
}
