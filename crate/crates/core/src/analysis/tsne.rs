//! Exact t-SNE with the standard optimization schedule.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{sq_dist, AnalysisError};

/// Largest allowed gap between achieved and target perplexity.
pub const PERPLEXITY_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and momentum 0.5.
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection2D {
    pub points: Array2<f64>,
    pub labels: Vec<String>,
}

/// Symmetrized joint affinities with the per-point precisions that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    pub p: Array2<f64>,
    /// Precision `beta_i = 1 / (2 sigma_i^2)` of each conditional distribution.
    pub betas: Vec<f64>,
    /// Perplexity the rows were fitted to.
    pub perplexity: f64,
}

/// Conditional distribution `p_{j|i}` over the squared distances of row `i`
/// and its Shannon entropy in nats.
fn conditional(d2: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let min = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d2
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-(d - min) * beta).exp() })
        .collect();
    let z: f64 = p.iter().sum();
    let mut h = 0.0;
    for v in &mut p {
        *v /= z;
        if *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Perplexity `exp(H)` of row `i`'s conditional distribution at precision `beta`.
pub fn conditional_perplexity(data: ArrayView2<'_, f64>, i: usize, beta: f64) -> f64 {
    let d2: Vec<f64> = (0..data.nrows()).map(|j| sq_dist(data.row(i), data.row(j))).collect();
    conditional(&d2, i, beta).1.exp()
}

/// Bisection on the precision so that the row's perplexity hits `target`.
fn fit_row(d2: &[f64], i: usize, target: f64) -> (Vec<f64>, f64) {
    let goal = target.ln();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut beta = 1.0;
    let mut best = conditional(d2, i, beta);
    for _ in 0..200 {
        let diff = best.1 - goal;
        if (best.1.exp() - target).abs() < PERPLEXITY_TOLERANCE * 1e-3 {
            break;
        }
        // entropy falls as beta grows
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
        best = conditional(d2, i, beta);
    }
    (best.0, beta)
}

/// Joint affinities `P = (P_cond + P_condᵀ) / 2N` for perplexity
/// `min(perplexity, (N - 1) / 3)`.
pub fn joint_affinities(data: ArrayView2<'_, f64>, perplexity: f64) -> Result<Affinities, AnalysisError> {
    let n = data.nrows();
    if n < 2 {
        return Err(AnalysisError::TooFewPoints { needed: 2, got: n });
    }
    if !(perplexity > 0.0) {
        return Err(AnalysisError::InvalidArgument(format!("perplexity {perplexity} must be positive")));
    }
    let target = perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut cond = Array2::zeros((n, n));
    let mut betas = Vec::with_capacity(n);
    for i in 0..n {
        let d2: Vec<f64> = (0..n).map(|j| sq_dist(data.row(i), data.row(j))).collect();
        let (row, beta) = fit_row(&d2, i, target);
        cond.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        betas.push(beta);
    }
    let p = (&cond + &cond.t()) / (2.0 * n as f64);
    Ok(Affinities {
        p,
        betas,
        perplexity: target,
    })
}

pub fn tsne(data: ArrayView2<'_, f64>, labels: &[String], options: &TsneOptions) -> Result<Projection2D, AnalysisError> {
    let n = data.nrows();
    if n < 4 {
        return Err(AnalysisError::TooFewPoints { needed: 4, got: n });
    }
    if labels.len() != n {
        return Err(AnalysisError::LengthMismatch(n, labels.len()));
    }
    let p = joint_affinities(data, options.perplexity)?.p;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    let mut grad = Array2::<f64>::zeros((n, 2));

    for iter in 0..options.iterations {
        let early = iter < options.exaggeration_iters;
        let exaggeration = if early { options.early_exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };

        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[[i, 0]] - y[[j, 0]];
                let dy = y[[i, 1]] - y[[j, 1]];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[[i, j]] = q;
                num[[j, i]] = q;
                z += 2.0 * q;
            }
        }
        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
                grad[[i, 0]] += 4.0 * w * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += 4.0 * w * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
            *gain = gain.max(0.01);
            *u = momentum * *u - options.learning_rate * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(ndarray::Axis(0)).expect("n > 0");
        y -= &mean;
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidArgument("t-SNE diverged".into()));
    }
    Ok(Projection2D {
        points: y,
        labels: labels.to_vec(),
    })
}
