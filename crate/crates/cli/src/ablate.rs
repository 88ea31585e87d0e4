//! Ablation grids: every combination of mining strategy, embedding
//! dimension, batch size, sequence length and seed becomes one training run
//! in its own directory. Results go to `ablation.csv` and a markdown summary
//! with one table per varied dimension.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gait_core::triplet::MiningKind;

use crate::pipeline::{self, Manifest};
use crate::{CliError, ModelArgs};

/// Synthetic data for grids without a capture file. With `seed` unset each
/// cell's seed also seeds its data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub duration: f64,
    pub noise: f64,
    pub seed: Option<u64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 8,
            duration: 120.0,
            noise: 0.01,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub mining: Vec<MiningKind>,
    pub embedding_dim: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub seq_len: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub split_ratio: f64,
    pub pk_labels: usize,
    /// Validation ARI during training; only the final score is reported.
    pub eval_every: usize,
    pub tsne_iters: usize,
    /// Capture file, relative to the grid file.
    pub data: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            mining: vec![MiningKind::SemiHard],
            embedding_dim: vec![32],
            batch_size: vec![64],
            seq_len: vec![30],
            seeds: vec![0],
            epochs: 300,
            lr: 1e-4,
            margin: gait_core::triplet::DEFAULT_MARGIN,
            split_ratio: 0.9,
            pk_labels: 8,
            eval_every: 0,
            tsne_iters: 1000,
            data: None,
            synth: None,
        }
    }
}

#[derive(Clone, Debug)]
struct Cell {
    id: String,
    mining: MiningKind,
    embedding_dim: usize,
    batch_size: usize,
    seq_len: usize,
    seed: u64,
}

#[derive(Clone, Debug)]
struct CellResult {
    cell: Cell,
    outcome: Result<pipeline::RunReport, String>,
}

impl AblationSpec {
    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &mining in &self.mining {
            for &embedding_dim in &self.embedding_dim {
                for &batch_size in &self.batch_size {
                    for &seq_len in &self.seq_len {
                        for &seed in &self.seeds {
                            let id = format!(
                                "{:03}-{}-d{embedding_dim}-n{batch_size}-t{seq_len}-s{seed}",
                                out.len(),
                                mining.name()
                            );
                            out.push(Cell {
                                id,
                                mining,
                                embedding_dim,
                                batch_size,
                                seq_len,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    fn model_args(&self, cell: &Cell) -> ModelArgs {
        ModelArgs {
            seed: Some(cell.seed),
            seq_len: Some(cell.seq_len),
            embedding_dim: Some(cell.embedding_dim),
            batch_size: Some(cell.batch_size),
            pk_labels: Some(self.pk_labels),
            margin: Some(self.margin),
            lr: Some(self.lr),
            mining: Some(cell.mining),
            epochs: Some(self.epochs),
            split_ratio: Some(self.split_ratio),
            eval_every: Some(self.eval_every),
            tsne_iters: Some(self.tsne_iters),
            ..ModelArgs::default()
        }
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn write_csv(path: &Path, results: &[CellResult]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(crate::artifacts::create(path)?);
    let err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(["cell", "mining", "embedding_dim", "batch_size", "seq_len", "seed", "status", "ari", "error"])
        .map_err(err)?;
    for r in results {
        let c = &r.cell;
        let (status, ari, error) = match &r.outcome {
            Ok(rep) => ("ok", rep.ari.to_string(), String::new()),
            Err(e) => ("failed", String::new(), e.clone()),
        };
        w.write_record([
            c.id.clone(),
            c.mining.name().to_string(),
            c.embedding_dim.to_string(),
            c.batch_size.to_string(),
            c.seq_len.to_string(),
            c.seed.to_string(),
            status.to_string(),
            ari,
            error,
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn summary_table(out: &mut String, title: &str, column: &str, results: &[CellResult], key: impl Fn(&Cell) -> String) {
    let mut groups: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in results {
        let k = key(&r.cell);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        let g = groups.entry(k).or_default();
        match &r.outcome {
            Ok(rep) => g.0.push(rep.ari),
            Err(_) => g.1 += 1,
        }
    }
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "| {column} | median ARI | mean ARI | runs | failed |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|");
    for k in order {
        let (mut aris, failed) = groups.remove(&k).expect("grouped");
        let mean = (!aris.is_empty()).then(|| aris.iter().sum::<f64>() / aris.len() as f64);
        let runs = aris.len();
        let _ = writeln!(out, "| {k} | {} | {} | {runs} | {failed} |", fmt4(median(&mut aris)), fmt4(mean));
    }
}

fn render_markdown(spec: &AblationSpec, results: &[CellResult]) -> String {
    let mut out = String::from("# Ablation results\n\n");
    let _ = writeln!(
        out,
        "Validation K-means ARI after {} epochs, aggregated over seeds and the other grid dimensions. \
         Failed cells are excluded from the statistics.\n",
        spec.epochs
    );
    summary_table(&mut out, "Triplet selection", "mining", results, |c| c.mining.name().to_string());
    let mut raw: Vec<f64> = results.iter().filter_map(|r| r.outcome.as_ref().ok().map(|rep| rep.raw_ari)).collect();
    let raw_mean = (!raw.is_empty()).then(|| raw.iter().sum::<f64>() / raw.len() as f64);
    let raw_runs = raw.len();
    let _ = writeln!(out, "| raw features | {} | {} | {raw_runs} | - |\n", fmt4(median(&mut raw)), fmt4(raw_mean));
    if spec.embedding_dim.len() > 1 {
        summary_table(&mut out, "Embedding dimension", "D", results, |c| c.embedding_dim.to_string());
        out.push('\n');
    }
    if spec.batch_size.len() > 1 {
        summary_table(&mut out, "Batch size", "N", results, |c| c.batch_size.to_string());
        out.push('\n');
    }
    if spec.seq_len.len() > 1 {
        summary_table(&mut out, "Sequence length", "T", results, |c| c.seq_len.to_string());
        out.push('\n');
    }
    let _ = writeln!(out, "## Cells\n");
    let _ = writeln!(out, "| cell | mining | D | N | T | seed | ARI | raw ARI |");
    let _ = writeln!(out, "|---|---|---:|---:|---:|---:|---:|---:|");
    for r in results {
        let c = &r.cell;
        let (ari, raw) = match &r.outcome {
            Ok(rep) => (format!("{:.4}", rep.ari), format!("{:.4}", rep.raw_ari)),
            Err(_) => ("failed".to_string(), "-".to_string()),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {ari} | {raw} |",
            c.id,
            c.mining.name(),
            c.embedding_dim,
            c.batch_size,
            c.seq_len,
            c.seed
        );
    }
    out
}

/// Capture file for a cell: the explicit one, or synthetic data generated
/// once per data seed under `<out>/data`.
fn data_for(
    spec: &AblationSpec,
    explicit: Option<&Path>,
    cell: &Cell,
    out: &Path,
    cache: &mut BTreeMap<u64, Result<PathBuf, String>>,
) -> Result<PathBuf, String> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let synth = spec.synth.as_ref().expect("checked before the grid runs");
    let seed = synth.seed.unwrap_or(cell.seed);
    cache
        .entry(seed)
        .or_insert_with(|| {
            let dir = out.join("data");
            fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e).to_string())?;
            let path = dir.join(format!("synth-s{seed}.jsonl"));
            pipeline::synth(&path, synth.subjects, synth.duration, synth.noise, seed).map_err(|e| e.to_string())?;
            Ok(path)
        })
        .clone()
}

pub(crate) fn run_ablation(spec_path: &Path, data: Option<&Path>, out: &Path, progress: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::io(spec_path, e))?;
    let spec: AblationSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", spec_path.display())))?;
    let explicit = match (data, &spec.data) {
        (Some(d), _) => Some(d.to_path_buf()),
        (None, Some(d)) => Some(spec_path.parent().unwrap_or(Path::new(".")).join(d)),
        (None, None) if spec.synth.is_some() => None,
        (None, None) => {
            return Err(CliError::Usage("the grid needs --data, a \"data\" path or a \"synth\" section".into()))
        }
    };
    let cells = spec.cells();
    if cells.is_empty() {
        return Err(CliError::Usage("the grid has no cells: every list must be non-empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut cache = BTreeMap::new();
    let mut results = Vec::with_capacity(cells.len());
    let total = cells.len();
    for (i, cell) in cells.into_iter().enumerate() {
        let outcome = data_for(&spec, explicit.as_deref(), &cell, out, &mut cache).and_then(|data| {
            let manifest = Manifest::resolve(&data, &spec.model_args(&cell)).map_err(|e| e.to_string())?;
            pipeline::train_run(&manifest, &out.join("cells").join(&cell.id), false).map_err(|e| e.to_string())
        });
        match &outcome {
            Ok(rep) => {
                println!("{} ari={}", cell.id, rep.ari);
                if progress {
                    eprintln!("cell {}/{total} {} ari={:.4} raw_ari={:.4}", i + 1, cell.id, rep.ari, rep.raw_ari);
                }
            }
            Err(e) => {
                println!("{} failed", cell.id);
                eprintln!("cell {}/{total} {} failed: {e}", i + 1, cell.id);
            }
        }
        results.push(CellResult { cell, outcome });
        // rewritten after every cell so long grids can be inspected midway
        write_csv(&out.join("ablation.csv"), &results)?;
        let md = out.join("ablation.md");
        fs::write(&md, render_markdown(&spec, &results)).map_err(|e| CliError::io(&md, e))?;
    }
    Ok(())
}
