//! Clustering, agreement scoring and 2-D projection of embeddings.

mod plot;
mod tsne;

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GaitSequence;

pub use plot::{emit_scatter_svg, render_scatter_svg, PALETTE};
pub use tsne::{
    conditional_perplexity, joint_affinities, tsne, Affinities, Projection2D, TsneOptions, PERPLEXITY_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("k = {k} is invalid for {n} points")]
    InvalidK { k: usize, n: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index drawn with probability proportional to `weights`; zero-weight
/// entries are never returned.
fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = Some(i);
        if r < acc {
            return Some(i);
        }
    }
    last
}

fn kmeans_pp(data: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(first))).collect();
    for c in 1..k {
        // all remaining mass at zero means duplicates: take the first unused point
        let next = weighted_pick(&d2, rng).unwrap_or_else(|| chosen.iter().position(|&u| !u).unwrap_or(0));
        chosen[next] = true;
        centroids.row_mut(c).assign(&data.row(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    centroids
}

/// Nearest centroid per point (lowest index on ties), then repair of empty
/// clusters with the farthest point of a cluster that can spare one.
/// Returns the inertia of the repaired assignment.
fn assign(data: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, labels: &mut [usize]) -> f64 {
    let k = centroids.nrows();
    let mut dist = vec![0.0; labels.len()];
    for (i, row) in data.rows().into_iter().enumerate() {
        let (best, d) = (0..k)
            .map(|c| (c, sq_dist(row, centroids.row(c))))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        labels[i] = best;
        dist[i] = d;
    }
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let far = (0..labels.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n leaves a cluster with two points");
        sizes[labels[far]] -= 1;
        sizes[c] = 1;
        labels[far] = c;
        dist[far] = 0.0;
        centroids.row_mut(c).assign(&data.row(far));
    }
    dist.iter().sum()
}

pub fn kmeans(
    data: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    options: KMeansOptions,
) -> Result<ClusterAssignment, AnalysisError> {
    kmeans_observed(data, k, seed, options, |_, _| {})
}

/// K-means++ seeding followed by Lloyd iterations. `observer` receives the
/// iteration index and the inertia after every assignment step; that
/// sequence is non-increasing.
pub fn kmeans_observed(
    data: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    options: KMeansOptions,
    mut observer: impl FnMut(usize, f64),
) -> Result<ClusterAssignment, AnalysisError> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(AnalysisError::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(data, k, &mut rng);
    let mut labels = vec![0; n];
    let mut iter = 0;
    loop {
        let inertia = assign(data, &mut centroids, &mut labels);
        observer(iter, inertia);
        if iter == options.max_iter {
            return Ok(ClusterAssignment {
                labels,
                centroids,
                inertia,
                iterations: iter,
            });
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (row, &l) in data.rows().into_iter().zip(&labels) {
            let mut s = sums.row_mut(l);
            s += &row;
            counts[l] += 1;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let mut s = sums.row_mut(c);
            s /= counts[c] as f64;
            shift = shift.max(sq_dist(s.view(), centroids.row(c)).sqrt());
        }
        centroids = sums;
        iter += 1;
        if shift < options.tol {
            let inertia = assign(data, &mut centroids, &mut labels);
            observer(iter, inertia);
            return Ok(ClusterAssignment {
                labels,
                centroids,
                inertia,
                iterations: iter,
            });
        }
    }
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

fn dense_ids<L: Hash + Eq>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// Adjusted Rand Index from the pair-counting contingency table. Returns 1
/// when the index cannot exceed its expectation (identical trivial partitions).
pub fn ari<L: Hash + Eq, M: Hash + Eq>(labels_true: &[L], labels_pred: &[M]) -> Result<f64, AnalysisError> {
    if labels_true.len() != labels_pred.len() {
        return Err(AnalysisError::LengthMismatch(labels_true.len(), labels_pred.len()));
    }
    let n = labels_true.len();
    if n < 2 {
        return Err(AnalysisError::TooFewPoints { needed: 2, got: n });
    }
    let (a, ka) = dense_ids(labels_true);
    let (b, kb) = dense_ids(labels_pred);
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&i, &j) in a.iter().zip(&b) {
        table[i * kb + j] += 1;
        rows[i] += 1;
        cols[j] += 1;
    }
    let index = table.iter().map(|&c| pairs(c)).sum::<u64>() as f64;
    let sum_a = rows.iter().map(|&c| pairs(c)).sum::<u64>() as f64;
    let sum_b = cols.iter().map(|&c| pairs(c)).sum::<u64>() as f64;
    let expected = sum_a * sum_b / pairs(n as u64) as f64;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Sequences flattened row-wise to `(N, J*T*3)`, the raw-feature baseline.
pub fn flatten_sequences(sequences: &[GaitSequence]) -> Array2<f64> {
    let width = sequences.first().map_or(0, |s| s.data().len());
    let mut out = Array2::zeros((sequences.len(), width));
    for (mut row, s) in out.rows_mut().into_iter().zip(sequences) {
        row.assign(&ArrayView1::from(s.data()));
    }
    out
}

/// Number of distinct labels, the default cluster count.
pub fn distinct_count<L: Hash + Eq>(labels: &[L]) -> usize {
    dense_ids(labels).1
}

/// One CSV row per sequence: `sequence_id,label,cluster,x,y`.
pub fn write_assignments_csv<W: Write>(
    writer: W,
    labels: &[String],
    clusters: &[usize],
    points: Option<ArrayView2<'_, f64>>,
) -> Result<(), AnalysisError> {
    if clusters.len() != labels.len() {
        return Err(AnalysisError::LengthMismatch(labels.len(), clusters.len()));
    }
    if let Some(p) = points {
        if p.nrows() != labels.len() || p.ncols() != 2 {
            return Err(AnalysisError::LengthMismatch(labels.len(), p.nrows()));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sequence_id", "label", "cluster", "x", "y"])?;
    for i in 0..labels.len() {
        let (x, y) = match points {
            Some(p) => (p[[i, 0]].to_string(), p[[i, 1]].to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([i.to_string(), labels[i].clone(), clusters[i].to_string(), x, y])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
