//! Pairwise distances, triplet mining and the hinge triplet loss.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TripletError {
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("no triplets mined")]
    NoTriplets,
    #[error("invalid margin {0}")]
    InvalidMargin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningKind {
    Random,
    SemiHard,
    Hard,
}

impl MiningKind {
    pub fn name(self) -> &'static str {
        match self {
            MiningKind::Random => "random",
            MiningKind::SemiHard => "semi-hard",
            MiningKind::Hard => "hard",
        }
    }
}

impl std::str::FromStr for MiningKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(MiningKind::Random),
            "semi-hard" | "semi_hard" | "semihard" => Ok(MiningKind::SemiHard),
            "hard" => Ok(MiningKind::Hard),
            other => Err(format!("unknown mining strategy '{other}' (expected random, semi-hard or hard)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningStrategy {
    pub kind: MiningKind,
    pub margin: f64,
    /// Semi-hard only: keep one random qualifying negative per pair instead of all.
    pub single_semi_hard: bool,
}

impl MiningStrategy {
    pub fn new(kind: MiningKind, margin: f64) -> Result<Self, TripletError> {
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(TripletError::InvalidMargin(margin));
        }
        Ok(Self {
            kind,
            margin,
            single_semi_hard: false,
        })
    }
}

impl Default for MiningStrategy {
    fn default() -> Self {
        Self {
            kind: MiningKind::SemiHard,
            margin: DEFAULT_MARGIN,
            single_semi_hard: false,
        }
    }
}

/// Euclidean distance between every pair of rows.
pub fn pairwise_distances(embeddings: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = embeddings.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let dist = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    d
}

/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_loss_value(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

fn check_batch<L: PartialEq>(dist: &Array2<f64>, labels: &[L]) -> Result<(), TripletError> {
    let n = labels.len();
    if dist.dim() != (n, n) {
        return Err(TripletError::DegenerateBatch(format!(
            "distance matrix {:?} does not match {n} labels",
            dist.dim()
        )));
    }
    let has_pair = (0..n).any(|i| (i + 1..n).any(|j| labels[i] == labels[j]));
    let has_two = (1..n).any(|i| labels[i] != labels[0]);
    if !has_pair || !has_two {
        return Err(TripletError::DegenerateBatch(
            "need a label with at least 2 samples and at least 2 distinct labels".into(),
        ));
    }
    Ok(())
}

/// Mines triplets for every ordered same-label `(anchor, positive)` pair.
///
/// Output is ordered by anchor, then positive, then negative.
pub fn mine_triplets<L: PartialEq, R: Rng + ?Sized>(
    dist: &Array2<f64>,
    labels: &[L],
    strategy: &MiningStrategy,
    rng: &mut R,
) -> Result<Vec<Triplet>, TripletError> {
    check_batch(dist, labels)?;
    let n = labels.len();
    let mut out = Vec::new();
    let mut candidates = Vec::with_capacity(n);
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            let d_ap = dist[[a, p]];
            let negatives = (0..n).filter(|&k| labels[k] != labels[a]);
            let chosen: Option<usize> = match strategy.kind {
                MiningKind::SemiHard => {
                    candidates.clear();
                    candidates.extend(negatives.filter(|&k| {
                        let loss = d_ap - dist[[a, k]] + strategy.margin;
                        loss > 0.0 && loss < strategy.margin
                    }));
                    if !strategy.single_semi_hard {
                        out.extend(candidates.iter().map(|&negative| Triplet {
                            anchor: a,
                            positive: p,
                            negative,
                        }));
                        None
                    } else if candidates.is_empty() {
                        None
                    } else {
                        Some(candidates[rng.random_range(0..candidates.len())])
                    }
                }
                // strict `<` keeps the lowest index on ties
                MiningKind::Hard => negatives.fold(None, |best: Option<usize>, k| match best {
                    Some(b) if dist[[a, b]] <= dist[[a, k]] => Some(b),
                    _ => Some(k),
                }),
                MiningKind::Random => {
                    candidates.clear();
                    candidates.extend(negatives);
                    Some(candidates[rng.random_range(0..candidates.len())])
                }
            };
            if let Some(negative) = chosen {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
    }
    Ok(out)
}

/// Mean hinge loss over mined triplets and its gradient with respect to the
/// embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub triplets: Vec<Triplet>,
}

/// Mines triplets on the current embeddings and differentiates their mean
/// hinge loss. The selection itself is treated as constant.
pub fn batch_triplet_loss<L: PartialEq, R: Rng + ?Sized>(
    embeddings: ArrayView2<'_, f64>,
    labels: &[L],
    strategy: &MiningStrategy,
    rng: &mut R,
) -> Result<TripletLoss, TripletError> {
    let dist = pairwise_distances(embeddings);
    let triplets = mine_triplets(&dist, labels, strategy, rng)?;
    if triplets.is_empty() {
        return Err(TripletError::NoTriplets);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut grad = Array2::zeros(embeddings.dim());
    let mut total = 0.0;
    // d||e_i - e_j|| / d e_i = (e_i - e_j) / d_ij, taken as 0 when the points coincide
    let push_pair = |grad: &mut Array2<f64>, i: usize, j: usize, w: f64| {
        let d = dist[[i, j]];
        if d == 0.0 {
            return;
        }
        for k in 0..embeddings.ncols() {
            let g = w * (embeddings[[i, k]] - embeddings[[j, k]]) / d;
            grad[[i, k]] += g;
            grad[[j, k]] -= g;
        }
    };
    for t in &triplets {
        let loss = triplet_loss_value(dist[[t.anchor, t.positive]], dist[[t.anchor, t.negative]], strategy.margin);
        total += loss;
        if loss > 0.0 {
            push_pair(&mut grad, t.anchor, t.positive, scale);
            push_pair(&mut grad, t.anchor, t.negative, -scale);
        }
    }
    Ok(TripletLoss {
        loss: total * scale,
        grad,
        triplets,
    })
}
