//! Four class-separability metrics over labeled embedding sets: silhouette,
//! separability index (nearest-neighbor label agreement), hypothesis margin,
//! and summed pairwise centroid distance. All use Euclidean distance and
//! break nearest-neighbor ties toward the lower sample index.

use serde::{Deserialize, Serialize};

use crate::error::{CareError, Result};

/// Denominator guard for a zero nearest-hit distance in the hypothesis
/// margin.
pub const HM_EPSILON: f64 = 1e-12;

/// A labeled set of fixed-width real vectors with densely numbered classes.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_count: usize,
}

impl EmbeddingSet {
    /// Validates: at least one point, equal dimensions, finite values, at
    /// least two classes, every class label in `0..class_count` occupied.
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let op = "EmbeddingSet::new";
        if points.is_empty() {
            return Err(CareError::contract(op, "no points"));
        }
        if points.len() != labels.len() {
            return Err(CareError::contract(
                op,
                format!("{} points but {} labels", points.len(), labels.len()),
            ));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(CareError::contract(op, "zero-dimensional points"));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(CareError::contract(
                    op,
                    format!("point {i} has dimension {}, expected {dim}", p.len()),
                ));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CareError::contract(op, format!("point {i} is not finite")));
            }
        }
        let class_count = labels.iter().max().map_or(0, |m| m + 1);
        if class_count < 2 {
            return Err(CareError::contract(op, "need at least 2 classes"));
        }
        let mut seen = vec![false; class_count];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(CareError::contract(
                op,
                format!("class {missing} has no points (labels must be dense)"),
            ));
        }
        Ok(EmbeddingSet {
            points,
            labels,
            class_count,
        })
    }

    /// Parse the `id,label,e0..e{m-1}` CSV emitted by training runs.
    /// `origin` names the source in error messages.
    pub fn from_csv_str(text: &str, origin: &str) -> Result<Self> {
        let fmt = |line: usize, msg: String| CareError::Format {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| fmt(1, "empty file".to_string()))?;
        let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
            return Err(fmt(
                1,
                format!("expected header id,label,e0,..., got {header:?}"),
            ));
        }
        for (j, c) in cols[2..].iter().enumerate() {
            if *c != format!("e{j}") {
                return Err(fmt(
                    1,
                    format!("expected embedding column e{j}, got {c:?}"),
                ));
            }
        }
        let dim = cols.len() - 2;
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(fmt(
                    line_no,
                    format!("expected {} fields, got {}", dim + 2, fields.len()),
                ));
            }
            fields[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| fmt(line_no, format!("bad id {:?}", fields[0])))?;
            let label: usize = fields[1]
                .trim()
                .parse()
                .map_err(|_| fmt(line_no, format!("bad label {:?}", fields[1])))?;
            let mut p = Vec::with_capacity(dim);
            for f in &fields[2..] {
                p.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| fmt(line_no, format!("bad number {f:?}")))?,
                );
            }
            points.push(p);
            labels.push(label);
        }
        if points.is_empty() {
            return Err(fmt(1, "no data rows".to_string()));
        }
        EmbeddingSet::new(points, labels)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.class_count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    fn require_two_per_class(&self, op: &'static str) -> Result<()> {
        if let Some(c) = self.class_sizes().iter().position(|&s| s < 2) {
            return Err(CareError::contract(
                op,
                format!("class {c} has fewer than 2 points"),
            ));
        }
        Ok(())
    }
}

/// Euclidean distance.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn distance_matrix(set: &EmbeddingSet) -> Vec<Vec<f64>> {
    let n = set.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(&set.points[i], &set.points[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Mean silhouette: per sample, `(b - a) / max(a, b)` where `a` is the mean
/// distance to the rest of its own class and `b` the smallest mean distance
/// to any other class; `0/0` is guarded to 0. Requires every class to have
/// at least two points. Lies in [-1, 1].
pub fn silhouette(set: &EmbeddingSet) -> Result<f64> {
    set.require_two_per_class("silhouette")?;
    let d = distance_matrix(set);
    let sizes = set.class_sizes();
    let n = set.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = set.labels[i];
        let mut sums = vec![0.0; set.class_count];
        for j in 0..n {
            if j != i {
                sums[set.labels[j]] += d[i][j];
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..set.class_count {
            if c != own {
                b = b.min(sums[c] / sizes[c] as f64);
            }
        }
        let denom = a.max(b);
        total += if denom == 0.0 { 0.0 } else { (b - a) / denom };
    }
    Ok(total / n as f64)
}

/// Fraction of samples whose nearest other sample (ties to the lower index)
/// carries the same label. Lies in [0, 1]. Requires at least 2 points.
pub fn separability_index(set: &EmbeddingSet) -> Result<f64> {
    if set.len() < 2 {
        return Err(CareError::contract(
            "separability_index",
            "need at least 2 points",
        ));
    }
    let d = distance_matrix(set);
    let n = set.len();
    let mut hits = 0usize;
    for i in 0..n {
        let mut nearest = usize::MAX;
        let mut best = f64::INFINITY;
        for j in 0..n {
            if j != i && d[i][j] < best {
                best = d[i][j];
                nearest = j;
            }
        }
        if set.labels[nearest] == set.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Hypothesis margin plus how many samples needed the zero-hit guard.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HypothesisMargin {
    pub value: f64,
    /// Samples whose nearest same-class distance was 0, evaluated with an
    /// epsilon denominator instead.
    pub guarded_samples: usize,
}

/// Mean over samples of `‖x - nearmiss(x)‖ / ‖x - nearhit(x)‖`, nearhit
/// being the closest same-class sample (excluding x) and nearmiss the
/// closest different-class sample. A zero nearhit distance is guarded with
/// an epsilon denominator and counted. Requires every class to have at
/// least two points. Nonnegative.
pub fn hypothesis_margin(set: &EmbeddingSet) -> Result<HypothesisMargin> {
    set.require_two_per_class("hypothesis_margin")?;
    let d = distance_matrix(set);
    let n = set.len();
    let mut total = 0.0;
    let mut guarded = 0usize;
    for i in 0..n {
        let mut hit = f64::INFINITY;
        let mut miss = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            if set.labels[j] == set.labels[i] {
                hit = hit.min(d[i][j]);
            } else {
                miss = miss.min(d[i][j]);
            }
        }
        let denom = if hit == 0.0 {
            guarded += 1;
            HM_EPSILON
        } else {
            hit
        };
        total += miss / denom;
    }
    Ok(HypothesisMargin {
        value: total / n as f64,
        guarded_samples: guarded,
    })
}

/// Sum of Euclidean distances between class centroids over unordered class
/// pairs. Nonnegative.
pub fn centroid_distance(set: &EmbeddingSet) -> Result<f64> {
    let dim = set.dim();
    let sizes = set.class_sizes();
    let mut centroids = vec![vec![0.0; dim]; set.class_count];
    for (p, &l) in set.points.iter().zip(&set.labels) {
        for (acc, v) in centroids[l].iter_mut().zip(p) {
            *acc += v;
        }
    }
    for (c, size) in centroids.iter_mut().zip(&sizes) {
        for v in c.iter_mut() {
            *v /= *size as f64;
        }
    }
    let mut total = 0.0;
    for i in 0..set.class_count {
        for j in (i + 1)..set.class_count {
            total += euclidean(&centroids[i], &centroids[j]);
        }
    }
    Ok(total)
}

/// The four metrics of one embedding set, serialized with exactly the keys
/// `silhouette`, `si`, `hm`, `cd`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub silhouette: f64,
    pub si: f64,
    pub hm: f64,
    pub cd: f64,
}

/// Compute all four metrics. Fails if any metric's precondition fails.
pub fn full_report(set: &EmbeddingSet) -> Result<SeparabilityReport> {
    Ok(SeparabilityReport {
        silhouette: silhouette(set)?,
        si: separability_index(set)?,
        hm: hypothesis_margin(set)?.value,
        cd: centroid_distance(set)?,
    })
}
