//! The `gait` command line: synthetic capture generation, training runs
//! with a reproducible manifest, embedding, clustering, projection, plotting
//! and ablation grids.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 I/O error.

mod ablate;
mod artifacts;
mod pipeline;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use gait_core::analysis::AnalysisError;
use gait_core::dataset::DatasetError;
use gait_core::embedder::EmbedderError;
use gait_core::trainer::TrainError;
use gait_core::triplet::{MiningKind, TripletError};

pub use ablate::{AblationSpec, SynthSpec};
pub use artifacts::{read_embeddings, read_projection, EmbeddingTable};
pub use pipeline::{DataSource, Manifest, RunReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbedderError> for CliError {
    fn from(e: EmbedderError) -> Self {
        match e {
            EmbedderError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TripletError> for CliError {
    fn from(e: TripletError) -> Self {
        match e {
            TripletError::InvalidMargin(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match &e {
            AnalysisError::Io(_) => CliError::Io(e.to_string()),
            AnalysisError::Csv(c) if c.is_io_error() => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::CheckpointIo { .. } => CliError::Io(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Embedder(e) => e.into(),
            TrainError::Triplet(e) => e.into(),
            TrainError::Analysis(e) => e.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gait", version, about = "Gait identity embeddings from skeleton sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSON-Lines capture file.
    Synth(SynthArgs),
    /// Train an embedder and write a run directory with all artifacts.
    Train(TrainArgs),
    /// Embed every sequence of a capture file with a trained checkpoint.
    Embed(EmbedArgs),
    /// K-means over an embeddings CSV.
    Cluster(ClusterArgs),
    /// Score a checkpoint: K-means ARI of its embeddings against subject labels.
    Evaluate(EvaluateArgs),
    /// t-SNE projection of an embeddings CSV.
    Tsne(TsneArgs),
    /// Render a projection CSV as an SVG scatter plot.
    Plot(PlotArgs),
    /// Run a grid of training cells from a JSON spec.
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Embed(_) => "embed",
            Command::Cluster(_) => "cluster",
            Command::Evaluate(_) => "evaluate",
            Command::Tsne(_) => "tsne",
            Command::Plot(_) => "plot",
            Command::Ablate(_) => "ablate",
        }
    }
}

fn parse_mining(s: &str) -> Result<MiningKind, String> {
    s.parse()
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    /// Seconds of walking per subject.
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Joint noise standard deviation as a fraction of body height.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Model, data-preparation and optimizer flags. Unset flags take the
/// documented defaults; they are optional so `train --manifest` can reject them.
#[derive(Debug, Default, Args)]
pub(crate) struct ModelArgs {
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frames per sequence [default: 30]
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Window stride in frames [default: seq-len]
    #[arg(long)]
    pub stride: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Sequences per batch, N = P * K [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Labels per batch, P; K = batch-size / P [default: 8]
    #[arg(long)]
    pub pk_labels: Option<usize>,
    /// Triplet margin [default: 0.2]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// random, semi-hard or hard [default: semi-hard]
    #[arg(long, value_parser = parse_mining)]
    pub mining: Option<MiningKind>,
    /// [default: 300]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fraction of each subject's sequences used for training [default: 0.9]
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Validation ARI every this many epochs, 0 disables [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Checkpoint into <out>/checkpoints every this many epochs, 0 disables [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Clusters for the final K-means [default: number of validation subjects]
    #[arg(long)]
    pub k: Option<usize>,
    /// t-SNE perplexity [default: 30]
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// t-SNE iterations [default: 1000]
    #[arg(long)]
    pub tsne_iters: Option<usize>,
}

impl ModelArgs {
    fn given(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut check = |set: bool, flag| {
            if set {
                out.push(flag);
            }
        };
        check(self.seed.is_some(), "--seed");
        check(self.seq_len.is_some(), "--seq-len");
        check(self.stride.is_some(), "--stride");
        check(self.embedding_dim.is_some(), "--embedding-dim");
        check(self.batch_size.is_some(), "--batch-size");
        check(self.pk_labels.is_some(), "--pk-labels");
        check(self.margin.is_some(), "--margin");
        check(self.lr.is_some(), "--lr");
        check(self.mining.is_some(), "--mining");
        check(self.epochs.is_some(), "--epochs");
        check(self.split_ratio.is_some(), "--split-ratio");
        check(self.eval_every.is_some(), "--eval-every");
        check(self.checkpoint_every.is_some(), "--checkpoint-every");
        check(self.k.is_some(), "--k");
        check(self.perplexity.is_some(), "--perplexity");
        check(self.tsne_iters.is_some(), "--tsne-iters");
        out
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON-Lines capture file.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    data: Option<PathBuf>,
    /// Re-run exactly the configuration recorded in a previous run's manifest.json.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Window stride in frames [default: the checkpoint's sequence length]
    #[arg(long)]
    stride: Option<usize>,
    /// Output embeddings CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// [default: number of distinct labels]
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output assignments CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Subset {
    /// Every sequence in the data file.
    All,
    /// The validation part of the split a `train` run with the same seed and ratio uses.
    Validation,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// [default: number of distinct labels]
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Subset::All)]
    subset: Subset,
    #[arg(long, default_value_t = 0.9)]
    split_ratio: f64,
    /// Window stride in frames [default: the checkpoint's sequence length]
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Debug, Args)]
struct TsneArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Output projection CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clusters for the cluster column [default: number of distinct labels]
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    projection: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// JSON grid specification.
    #[arg(long)]
    spec: PathBuf,
    /// Capture file shared by every cell; overrides the grid's data source.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-cell progress on stderr.
    #[arg(long)]
    quiet: bool,
}

fn usage_of(command: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    cmd.find_subcommand_mut(command)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default()
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Errors go to stderr, results to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let name = cli.command.name();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\n{}", usage_of(name));
            }
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(a) => pipeline::synth(&a.out, a.subjects, a.duration, a.noise, a.seed),
        Command::Train(a) => {
            let manifest = match (&a.manifest, &a.data) {
                (Some(path), _) => {
                    if let Some(flag) = a.model.given().first() {
                        return Err(CliError::Usage(format!("{flag} cannot be combined with --manifest")));
                    }
                    Manifest::read(path)?
                }
                (None, Some(data)) => Manifest::resolve(data, &a.model)?,
                (None, None) => return Err(CliError::Usage("one of --data or --manifest is required".into())),
            };
            let report = pipeline::train_run(&manifest, &a.out, !a.quiet)?;
            println!("ari={}", report.ari);
            println!("raw_ari={}", report.raw_ari);
            Ok(())
        }
        Command::Embed(a) => pipeline::embed(&a.checkpoint, &a.data, a.stride, &a.out),
        Command::Cluster(a) => {
            let ari = pipeline::cluster(&a.embeddings, a.k, a.seed, &a.out)?;
            println!("ari={ari}");
            Ok(())
        }
        Command::Evaluate(a) => {
            let split = match a.subset {
                Subset::All => None,
                Subset::Validation => Some(a.split_ratio),
            };
            let ari = pipeline::evaluate(&a.checkpoint, &a.data, a.k, a.seed, split, a.stride)?;
            println!("ari={ari}");
            Ok(())
        }
        Command::Tsne(a) => pipeline::tsne(&a.embeddings, &a.out, a.perplexity, a.iters, a.seed, a.k),
        Command::Plot(a) => pipeline::plot(&a.projection, &a.out),
        Command::Ablate(a) => ablate::run_ablation(&a.spec, a.data.as_deref(), &a.out, !a.quiet),
    }
}
