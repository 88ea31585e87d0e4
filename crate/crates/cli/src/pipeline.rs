//! Subcommand bodies and the training-run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gait_core::analysis::{self, KMeansOptions, TsneOptions};
use gait_core::dataset::{
    parse_capture, prepare_sequences, split_train_val, synth_generate, write_capture, CaptureTrack, DatasetError,
    SynthSubjectParams,
};
use gait_core::embedder::{embed_batch, EmbedderConfig};
use gait_core::trainer::{load_checkpoint, save_checkpoint, train_with_progress, EpochRecord, TrainConfig};
use gait_core::triplet::{MiningKind, MiningStrategy};

use crate::artifacts::{create, read_embeddings, read_projection, write_assignments, write_embeddings};
use crate::{CliError, ModelArgs};

/// Capture file identity: the run refuses data whose length or digest changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl DataSource {
    pub fn of_file(path: &Path) -> Result<Self, CliError> {
        let path = fs::canonicalize(path).map_err(|e| CliError::io(path, e))?;
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self {
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
            path,
        })
    }

    /// Reads and parses the file after checking it is the one recorded.
    fn load(&self) -> Result<Vec<CaptureTrack>, CliError> {
        let bytes = fs::read(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if bytes.len() as u64 != self.bytes || digest != self.sha256 {
            return Err(CliError::Data(format!(
                "{} changed since the manifest was written (sha256 {digest}, expected {})",
                self.path.display(),
                self.sha256
            )));
        }
        Ok(parse_capture(&bytes[..])?)
    }
}

fn load_capture(path: &Path) -> Result<Vec<CaptureTrack>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_capture(&bytes[..]).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Every parameter of a training run. Written to `manifest.json` in the run
/// directory; `train --manifest` replays it bit for bit. The run directory
/// itself is not recorded, so a replay can target any directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: String,
    pub data: DataSource,
    /// Drives the split, initialization, batch sampling, mining, K-means and t-SNE.
    pub seed: u64,
    pub seq_len: usize,
    pub stride: usize,
    pub split_ratio: f64,
    pub train: TrainConfig,
    /// Clusters for the final K-means; `None` until resolved to the number
    /// of validation subjects.
    pub clusters: Option<usize>,
    pub kmeans: KMeansOptions,
    pub tsne: TsneOptions,
}

impl Manifest {
    /// Applies defaults to the flags and fingerprints the data file.
    pub(crate) fn resolve(data: &Path, a: &ModelArgs) -> Result<Self, CliError> {
        let seed = a.seed.unwrap_or(0);
        let seq_len = a.seq_len.unwrap_or(30);
        let stride = a.stride.unwrap_or(seq_len);
        let batch_size = a.batch_size.unwrap_or(64);
        let p = a.pk_labels.unwrap_or(8);
        if seq_len == 0 || stride == 0 {
            return Err(CliError::Usage("--seq-len and --stride must be positive".into()));
        }
        if p == 0 || batch_size % p != 0 {
            return Err(CliError::Usage(format!(
                "--batch-size {batch_size} must be a multiple of --pk-labels {p}"
            )));
        }
        let split_ratio = a.split_ratio.unwrap_or(0.9);
        if !(split_ratio > 0.0 && split_ratio < 1.0) {
            return Err(CliError::Usage(format!("--split-ratio {split_ratio} must lie in (0, 1)")));
        }
        let mining = MiningStrategy::new(
            a.mining.unwrap_or(MiningKind::SemiHard),
            a.margin.unwrap_or(gait_core::triplet::DEFAULT_MARGIN),
        )?;
        let train = TrainConfig {
            p,
            k: batch_size / p,
            epochs: a.epochs.unwrap_or(300),
            learning_rate: a.lr.unwrap_or(1e-4),
            mining,
            seed,
            embedder: EmbedderConfig {
                embedding_dim: a.embedding_dim.unwrap_or(32),
                seq_len,
                ..EmbedderConfig::default()
            },
            checkpoint_every: a.checkpoint_every.unwrap_or(0),
            checkpoint_dir: None,
            eval_every: a.eval_every.unwrap_or(1),
        };
        let mut probe = train.clone();
        probe.checkpoint_dir = Some(PathBuf::new());
        probe.validate()?;
        if a.k == Some(0) {
            return Err(CliError::Usage("--k must be positive".into()));
        }
        let tsne = TsneOptions {
            perplexity: a.perplexity.unwrap_or(30.0),
            iterations: a.tsne_iters.unwrap_or(1000),
            seed,
            ..TsneOptions::default()
        };
        if !(tsne.perplexity > 0.0) {
            return Err(CliError::Usage(format!("--perplexity {} must be positive", tsne.perplexity)));
        }
        Ok(Self {
            generator: format!("gait {}", env!("CARGO_PKG_VERSION")),
            data: DataSource::of_file(data)?,
            seed,
            seq_len,
            stride,
            split_ratio,
            train,
            clusters: a.k,
            kmeans: KMeansOptions::default(),
            tsne,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}

/// Final validation scores of a training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunReport {
    /// K-means ARI of the trained embeddings.
    pub ari: f64,
    /// K-means ARI of the flattened input tensors, same k and seed.
    pub raw_ari: f64,
}

fn progress_line(r: &EpochRecord, epochs: usize) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    format!(
        "epoch {}/{epochs} loss={} triplets={} skipped={}/{} val_ari={} ({:.1}s)",
        r.epoch,
        opt(r.mean_loss),
        r.triplets,
        r.skipped_steps,
        r.steps,
        opt(r.val_ari),
        r.wall_seconds
    )
}

/// Trains and writes `manifest.json`, `final.ckpt`, `history.csv`,
/// `embeddings.csv` (validation set), `projection.csv` and `tsne.svg` into `out`.
pub fn train_run(manifest: &Manifest, out: &Path, progress: bool) -> Result<RunReport, CliError> {
    let tracks = manifest.data.load()?;
    let sequences = prepare_sequences(&tracks, manifest.seq_len, manifest.stride)?;
    let split = split_train_val(&sequences, manifest.split_ratio, manifest.seed)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut manifest = manifest.clone();
    let labels: Vec<String> = split.validation.iter().map(|s| s.label.clone()).collect();
    let k = *manifest.clusters.get_or_insert(analysis::distinct_count(&labels));
    manifest.write(&out.join("manifest.json"))?;

    let mut config = manifest.train.clone();
    if config.checkpoint_every > 0 {
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        config.checkpoint_dir = Some(dir);
    }
    let epochs = config.epochs;
    let outcome = train_with_progress(&split, &config, |r| {
        if progress {
            eprintln!("{}", progress_line(r, epochs));
        }
    })?;
    save_checkpoint(&outcome.params, &outcome.adam, &out.join("final.ckpt"))?;
    let history = out.join("history.csv");
    outcome
        .history
        .write_csv(create(&history)?)
        .map_err(|e| CliError::io(&history, e))?;

    let batch = embed_batch(&outcome.params, &split.validation)?;
    write_embeddings(&out.join("embeddings.csv"), &split.validation, &batch.matrix)?;
    let clusters = analysis::kmeans(batch.matrix.view(), k, manifest.seed, manifest.kmeans)?;
    let ari = analysis::ari(&labels, &clusters.labels)?;
    let raw = analysis::flatten_sequences(&split.validation);
    let raw_clusters = analysis::kmeans(raw.view(), k, manifest.seed, manifest.kmeans)?;
    let raw_ari = analysis::ari(&labels, &raw_clusters.labels)?;

    let projection = analysis::tsne(batch.matrix.view(), &labels, &manifest.tsne)?;
    write_assignments(&out.join("projection.csv"), &labels, &clusters.labels, Some(&projection.points))?;
    analysis::emit_scatter_svg(&projection, &out.join("tsne.svg"))?;
    Ok(RunReport { ari, raw_ari })
}

pub(crate) fn synth(out: &Path, subjects: usize, duration: f64, noise: f64, seed: u64) -> Result<(), CliError> {
    if subjects == 0 || !(duration > 0.0) {
        return Err(CliError::Usage("--subjects and --duration must be positive".into()));
    }
    let params = SynthSubjectParams::sample_many(subjects, noise, seed);
    let tracks = synth_generate(&params, duration, seed).map_err(|e| match e {
        DatasetError::InvalidParams(_) | DatasetError::InvalidArgument(_) => CliError::Usage(e.to_string()),
        e => e.into(),
    })?;
    let mut w = create(out)?;
    write_capture(&mut w, &tracks).map_err(|e| CliError::io(out, e))?;
    std::io::Write::flush(&mut w).map_err(|e| CliError::io(out, e))
}

pub(crate) fn embed(checkpoint: &Path, data: &Path, stride: Option<usize>, out: &Path) -> Result<(), CliError> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let seq_len = params.config.seq_len;
    let sequences = prepare_sequences(&load_capture(data)?, seq_len, stride.unwrap_or(seq_len))?;
    let batch = embed_batch(&params, &sequences)?;
    write_embeddings(out, &sequences, &batch.matrix)
}

pub(crate) fn evaluate(
    checkpoint: &Path,
    data: &Path,
    k: Option<usize>,
    seed: u64,
    validation_split: Option<f64>,
    stride: Option<usize>,
) -> Result<f64, CliError> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let seq_len = params.config.seq_len;
    let mut sequences = prepare_sequences(&load_capture(data)?, seq_len, stride.unwrap_or(seq_len))?;
    if let Some(ratio) = validation_split {
        sequences = split_train_val(&sequences, ratio, seed)?.validation;
    }
    let batch = embed_batch(&params, &sequences)?;
    let k = k.unwrap_or_else(|| analysis::distinct_count(&batch.labels));
    let clusters = analysis::kmeans(batch.matrix.view(), k, seed, KMeansOptions::default())?;
    Ok(analysis::ari(&batch.labels, &clusters.labels)?)
}

pub(crate) fn cluster(embeddings: &Path, k: Option<usize>, seed: u64, out: &Path) -> Result<f64, CliError> {
    let table = read_embeddings(embeddings)?;
    let k = k.unwrap_or_else(|| analysis::distinct_count(&table.labels));
    let clusters = analysis::kmeans(table.matrix.view(), k, seed, KMeansOptions::default())?;
    write_assignments(out, &table.labels, &clusters.labels, None)?;
    Ok(analysis::ari(&table.labels, &clusters.labels)?)
}

pub(crate) fn tsne(
    embeddings: &Path,
    out: &Path,
    perplexity: f64,
    iterations: usize,
    seed: u64,
    k: Option<usize>,
) -> Result<(), CliError> {
    if !(perplexity > 0.0) {
        return Err(CliError::Usage(format!("--perplexity {perplexity} must be positive")));
    }
    let table = read_embeddings(embeddings)?;
    let options = TsneOptions {
        perplexity,
        iterations,
        seed,
        ..TsneOptions::default()
    };
    let projection = analysis::tsne(table.matrix.view(), &table.labels, &options)?;
    let k = k.unwrap_or_else(|| analysis::distinct_count(&table.labels));
    let clusters = analysis::kmeans(table.matrix.view(), k, seed, KMeansOptions::default())?;
    write_assignments(out, &table.labels, &clusters.labels, Some(&projection.points))
}

pub(crate) fn plot(projection: &Path, out: &Path) -> Result<(), CliError> {
    let projection = read_projection(projection)?;
    analysis::emit_scatter_svg(&projection, out)?;
    Ok(())
}
