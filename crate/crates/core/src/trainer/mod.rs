//! Training loop: PK batches, semi-hard (or other) mining, backprop through
//! per-sample graphs and Adam updates.

mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, KMeansOptions};
use crate::autodiff::{Real, Tensor};
use crate::dataset::{DatasetSplit, GaitSequence};
use crate::embedder::{embed_batch, init_embedder, EmbedderConfig, EmbedderError, EmbedderGraph, EmbedderParams};
use crate::triplet::{batch_triplet_loss, MiningStrategy, TripletError};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint i/o on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    FormatError(String),
    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Embedder(#[from] EmbedderError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Labels per batch.
    pub p: usize,
    /// Sequences per label per batch.
    pub k: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mining: MiningStrategy,
    pub seed: u64,
    pub embedder: EmbedderConfig,
    /// Write `epoch-NNNN.ckpt` into `checkpoint_dir` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Score validation ARI every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 8,
            k: 8,
            epochs: 300,
            learning_rate: 1e-4,
            mining: MiningStrategy::default(),
            seed: 0,
            embedder: EmbedderConfig::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.p < 2 || self.k < 2 {
            return Err(TrainError::InvalidConfig(format!("need P >= 2 and K >= 2, got P={} K={}", self.p, self.k)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.mining.margin > 0.0) {
            return Err(TrainError::InvalidConfig(format!("margin {} must be positive", self.mining.margin)));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(TrainError::InvalidConfig("checkpoint_every set without checkpoint_dir".into()));
        }
        self.embedder.validate()?;
        Ok(())
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(TrainError::ShapeMismatch(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g.as_f64();
            let mj = ADAM_BETA1 * m[j].as_f64() + (1.0 - ADAM_BETA1) * g;
            let vj = ADAM_BETA2 * v[j].as_f64() + (1.0 - ADAM_BETA2) * g * g;
            m[j] = T::of_f64(mj);
            v[j] = T::of_f64(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
            *w = T::of_f64(w.as_f64() - update);
        }
    }
    Ok(())
}

/// Draws `p` labels without replacement among those with at least `k`
/// sequences, then `k` sequences of each. Returns indices into `train`,
/// grouped by label.
pub fn sample_pk_batch<R: Rng + ?Sized>(
    train: &[GaitSequence],
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, TrainError> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_label.entry(s.label.as_str()).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_label.values().filter(|v| v.len() >= k).collect();
    if eligible.len() < p {
        let deficient: Vec<String> = by_label
            .iter()
            .filter(|(_, v)| v.len() < k)
            .map(|(l, v)| format!("{l} ({})", v.len()))
            .collect();
        return Err(TrainError::InsufficientData(format!(
            "need {p} labels with at least {k} sequences, found {} of {}; deficient: [{}]",
            eligible.len(),
            by_label.len(),
            deficient.join(", ")
        )));
    }
    let mut out = Vec::with_capacity(p * k);
    for li in index::sample(rng, eligible.len(), p).into_iter() {
        let members = eligible[li];
        out.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the steps that found triplets; `None` if every step was skipped.
    pub mean_loss: Option<f64>,
    pub max_step_loss: Option<f64>,
    pub step_losses: Vec<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
    pub triplets: usize,
    pub val_ari: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_val_ari(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_ari)
    }

    /// Writes one row per epoch. Wall time is left out so identical runs
    /// produce identical files.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(w, "epoch,mean_loss,max_step_loss,steps,skipped_steps,triplets,val_ari")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch,
                opt(r.mean_loss),
                opt(r.max_step_loss),
                r.steps,
                r.skipped_steps,
                r.triplets,
                opt(r.val_ari)
            )?;
        }
        w.flush()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EmbedderParams<f32>,
    pub adam: AdamState<f32>,
    pub history: TrainHistory,
}

/// K-means ARI of the current embeddings of `sequences`, with k = number of labels.
pub fn embedding_ari(params: &EmbedderParams<f32>, sequences: &[GaitSequence], seed: u64) -> Result<f64, TrainError> {
    let batch = embed_batch(params, sequences)?;
    let k = analysis::distinct_count(&batch.labels);
    let clusters = analysis::kmeans(batch.matrix.view(), k, seed, KMeansOptions::default())?;
    Ok(analysis::ari(&batch.labels, &clusters.labels)?)
}

pub fn train(split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_progress(split, config, |_| {})
}

/// Runs `config.epochs` epochs of `floor(train / N)` PK batches each and
/// calls `progress` after every epoch. Steps without triplets are skipped.
pub fn train_with_progress(
    split: &DatasetSplit,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut params = init_embedder::<f32>(&config.embedder, config.seed)?;
    let mut adam = AdamState::zeros_like(params.tensors.iter().map(|(_, t)| t));
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok(TrainOutcome { params, adam, history });
    }
    let train = &split.train;
    if let Some(bad) = train.iter().find(|s| s.seq_len() != config.embedder.seq_len) {
        return Err(TrainError::ShapeMismatch(format!(
            "sequence of length {} for a network expecting {}",
            bad.seq_len(),
            config.embedder.seq_len
        )));
    }
    let n = config.batch_size();
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed);
    sampler.set_stream(1);
    let mut miner = ChaCha8Rng::seed_from_u64(config.seed);
    miner.set_stream(2);
    sample_pk_batch(train, config.p, config.k, &mut sampler.clone())?;
    let steps_per_epoch = train.len() / n;

    let mut pool: Vec<EmbedderGraph<f32>> = (0..n).map(|_| EmbedderGraph::new(&params)).collect::<Result<_, _>>()?;
    let d = config.embedder.embedding_dim;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut record = EpochRecord {
            epoch,
            mean_loss: None,
            max_step_loss: None,
            step_losses: Vec::new(),
            steps: steps_per_epoch,
            skipped_steps: 0,
            triplets: 0,
            val_ari: None,
            wall_seconds: 0.0,
        };
        for _ in 0..steps_per_epoch {
            let batch = sample_pk_batch(train, config.p, config.k, &mut sampler)?;
            let mut emb = Array2::<f64>::zeros((n, d));
            for (slot, (net, &idx)) in pool.iter_mut().zip(&batch).enumerate() {
                net.load_params(&params)?;
                let e = net.embed(&train[idx])?;
                for (dst, v) in emb.row_mut(slot).iter_mut().zip(e) {
                    *dst = f64::from(v);
                }
            }
            let labels: Vec<&str> = batch.iter().map(|&i| train[i].label.as_str()).collect();
            let out = match batch_triplet_loss(emb.view(), &labels, &config.mining, &mut miner) {
                Ok(out) => out,
                Err(TripletError::NoTriplets) => {
                    record.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let mut grads: Vec<Tensor<f32>> = params.tensors.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            for (slot, net) in pool.iter().enumerate() {
                let seed: Vec<f32> = out.grad.row(slot).iter().map(|&g| g as f32).collect();
                if seed.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for (acc, g) in grads.iter_mut().zip(net.param_grads(&seed)?) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            adam_step(params.tensors.iter_mut().map(|(_, t)| t), &grads, &mut adam, config.learning_rate)?;
            record.triplets += out.triplets.len();
            record.step_losses.push(out.loss);
        }
        if !record.step_losses.is_empty() {
            record.mean_loss = Some(record.step_losses.iter().sum::<f64>() / record.step_losses.len() as f64);
            record.max_step_loss = record.step_losses.iter().copied().reduce(f64::max);
        }
        let evaluate = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        if evaluate && split.validation.len() >= 2 {
            record.val_ari = Some(embedding_ari(&params, &split.validation, config.seed)?);
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let dir = config.checkpoint_dir.as_ref().expect("validated");
            save_checkpoint(&params, &adam, &dir.join(format!("epoch-{epoch:04}.ckpt")))?;
        }
        record.wall_seconds = started.elapsed().as_secs_f64();
        progress(&record);
        history.records.push(record);
    }
    Ok(TrainOutcome { params, adam, history })
}

#[cfg(test)]
mod tests;
