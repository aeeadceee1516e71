//! Shared helpers for the integration tests: a deterministic synthetic
//! graph-classification dataset and independent brute-force separability
//! oracles (written from the metric definitions, not the library code).

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use care_core::diffcore::Matrix;
use care_core::graphio::{serialize_tudataset, Dataset, FeaturePolicy, GraphRecord};

fn link(adj: &mut Matrix, a: usize, b: usize) {
    if a != b {
        adj.set(a, b, 1.0);
        adj.set(b, a, 1.0);
    }
}

/// A two-class synthetic dataset: sparse chained graphs (class 0) versus
/// densely chorded rings (class 1). Node labels follow capped degree with a
/// little label noise, and features are their one-hots, so the structure is
/// learnable by a small message-passing model within a few epochs.
pub fn synthetic_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(per_class * 2);
    let mut node_labels: Vec<Vec<usize>> = Vec::with_capacity(per_class * 2);
    for i in 0..per_class * 2 {
        let class = i % 2;
        let n: usize = rng.random_range(6..=12);
        let mut adj = Matrix::zeros(n, n);
        if class == 0 {
            for v in 0..n - 1 {
                link(&mut adj, v, v + 1);
            }
            link(&mut adj, 0, n / 2);
        } else {
            for v in 0..n {
                link(&mut adj, v, (v + 1) % n);
                link(&mut adj, v, (v + 2) % n);
            }
        }
        let labels: Vec<usize> = (0..n)
            .map(|v| {
                let degree = (0..n).filter(|&u| adj.get(v, u) != 0.0).count();
                if rng.random_bool(0.08) {
                    rng.random_range(0..4)
                } else {
                    degree.min(3)
                }
            })
            .collect();
        let mut features = Matrix::zeros(n, 4);
        for (v, &l) in labels.iter().enumerate() {
            features.set(v, l, 1.0);
        }
        graphs.push(GraphRecord {
            adjacency: adj,
            features,
            label: class,
        });
        node_labels.push(labels);
    }
    Dataset {
        name: "SYNTH".to_string(),
        graphs,
        class_count: 2,
        feature_dim: 4,
        feature_policy: FeaturePolicy::OnehotLabel,
        node_labels: Some(node_labels),
    }
}

/// Write the synthetic dataset to `dir` in the text layout the parser reads.
pub fn write_synthetic(dir: &Path, per_class: usize, seed: u64) -> Dataset {
    let dataset = synthetic_dataset(per_class, seed);
    serialize_tudataset(dir, &dataset).expect("serialize synthetic dataset");
    dataset
}

// ---------------------------------------------------------------------
// Brute-force separability oracles. Deliberately re-derived from the
// definitions with plain indexed loops; they share no code with the
// library implementations they cross-check.
// ---------------------------------------------------------------------

pub fn oracle_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        acc += d * d;
    }
    acc.sqrt()
}

fn oracle_class_count(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

/// Mean silhouette coefficient: per point, (b - a) / max(a, b) with a the
/// mean intra-class distance (self excluded) and b the smallest mean
/// distance to any other class; 0 when both are 0.
pub fn oracle_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let classes = oracle_class_count(labels);
    let mut total = 0.0;
    for i in 0..n {
        let mut sum = vec![0.0; classes];
        let mut count = vec![0usize; classes];
        for j in 0..n {
            if i == j {
                continue;
            }
            sum[labels[j]] += oracle_distance(&points[i], &points[j]);
            count[labels[j]] += 1;
        }
        let a = sum[labels[i]] / count[labels[i]] as f64;
        let mut b = f64::INFINITY;
        for c in 0..classes {
            if c != labels[i] && count[c] > 0 {
                let mean = sum[c] / count[c] as f64;
                if mean < b {
                    b = mean;
                }
            }
        }
        let m = if a > b { a } else { b };
        if m != 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Fraction of points whose single nearest neighbour (strictly smaller
/// distance wins; the earlier index wins ties) carries the same label.
pub fn oracle_separability_index(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut agree = 0usize;
    for i in 0..n {
        let mut best_j = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = oracle_distance(&points[i], &points[j]);
            if d < best_d {
                best_d = d;
                best_j = j;
            }
        }
        if labels[best_j] == labels[i] {
            agree += 1;
        }
    }
    agree as f64 / n as f64
}

/// Mean ratio of nearest-miss to nearest-hit distance; a zero nearest hit
/// is guarded by a 1e-12 denominator.
pub fn oracle_hypothesis_margin(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut hit = f64::INFINITY;
        let mut miss = f64::INFINITY;
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = oracle_distance(&points[i], &points[j]);
            if labels[j] == labels[i] {
                if d < hit {
                    hit = d;
                }
            } else if d < miss {
                miss = d;
            }
        }
        let denom = if hit == 0.0 { 1e-12 } else { hit };
        total += miss / denom;
    }
    total / n as f64
}

/// Sum of Euclidean distances between all pairs of class centroids.
pub fn oracle_centroid_distance(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = oracle_class_count(labels);
    let dim = points[0].len();
    let mut centroid = vec![vec![0.0; dim]; classes];
    let mut count = vec![0usize; classes];
    for (p, &l) in points.iter().zip(labels) {
        for k in 0..dim {
            centroid[l][k] += p[k];
        }
        count[l] += 1;
    }
    for c in 0..classes {
        for k in 0..dim {
            centroid[c][k] /= count[c] as f64;
        }
    }
    let mut total = 0.0;
    for a in 0..classes {
        for b in a + 1..classes {
            total += oracle_distance(&centroid[a], &centroid[b]);
        }
    }
    total
}

/// A random labeled point set with every class populated by at least two
/// points (the regime the metrics are defined on).
pub fn random_point_set(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let classes: usize = rng.random_range(2..=4);
    let dim: usize = rng.random_range(1..=16);
    let n: usize = rng.random_range(classes * 2..=200);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    // Two guaranteed members per class, then random fill.
    for c in 0..classes {
        for _ in 0..2 {
            labels.push(c);
        }
    }
    while labels.len() < n {
        labels.push(rng.random_range(0..classes));
    }
    for &l in &labels {
        let center = l as f64 * 2.0;
        let p: Vec<f64> = (0..dim)
            .map(|_| center + rng.random_range(-3.0..3.0))
            .collect();
        points.push(p);
    }
    (points, labels)
}

/// Render a point set as the embedding CSV the metrics commands read.
pub fn points_to_csv(points: &[Vec<f64>], labels: &[usize]) -> String {
    let dim = points[0].len();
    let mut csv = String::from("id,label");
    for k in 0..dim {
        csv.push_str(&format!(",e{k}"));
    }
    csv.push('\n');
    for (i, (p, l)) in points.iter().zip(labels).enumerate() {
        csv.push_str(&format!("{i},{l}"));
        for v in p {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    csv
}
