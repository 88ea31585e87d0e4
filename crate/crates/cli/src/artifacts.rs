//! CSV artifacts passed between subcommands.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use gait_core::analysis::{self, Projection2D};
use gait_core::dataset::GaitSequence;

use crate::CliError;

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    if e.is_io_error() {
        CliError::Io(format!("{}: {e}", path.display()))
    } else {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Embeddings with their labels, as read back from `embeddings.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub labels: Vec<String>,
    pub matrix: Array2<f64>,
}

/// `sequence_id,label,track,start,e0,...`; floats use shortest round-trip formatting.
pub(crate) fn write_embeddings(path: &Path, sequences: &[GaitSequence], matrix: &Array2<f64>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["sequence_id".to_string(), "label".into(), "track".into(), "start".into()];
    header.extend((0..matrix.ncols()).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, (s, row)) in sequences.iter().zip(matrix.rows()).enumerate() {
        let mut rec = vec![i.to_string(), s.label.clone(), s.source.track.to_string(), s.source.start.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn open_csv(path: &Path) -> Result<(csv::Reader<File>, csv::StringRecord), CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    Ok((r, header))
}

fn column(header: &csv::StringRecord, name: &str, path: &Path) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Data(format!("{}: missing column '{name}'", path.display())))
}

fn number(field: &str, path: &Path, row: usize) -> Result<f64, CliError> {
    field
        .parse()
        .map_err(|_| CliError::Data(format!("{}: row {row}: '{field}' is not a number", path.display())))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingTable, CliError> {
    let (mut r, header) = open_csv(path)?;
    let label = column(&header, "label", path)?;
    let dims: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.strip_prefix('e').is_some_and(|d| d.parse::<usize>().is_ok()))
        .map(|(i, _)| i)
        .collect();
    if dims.is_empty() {
        return Err(CliError::Data(format!("{}: no embedding columns e0, e1, ...", path.display())));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        labels.push(rec[label].to_string());
        for &c in &dims {
            values.push(number(&rec[c], path, row + 1)?);
        }
    }
    let matrix = Array2::from_shape_vec((labels.len(), dims.len()), values).expect("row-major fill");
    Ok(EmbeddingTable { labels, matrix })
}

/// Reads `sequence_id,label,cluster,x,y`; the cluster column is not needed to plot.
pub fn read_projection(path: &Path) -> Result<Projection2D, CliError> {
    let (mut r, header) = open_csv(path)?;
    let (label, x, y) = (column(&header, "label", path)?, column(&header, "x", path)?, column(&header, "y", path)?);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        labels.push(rec[label].to_string());
        values.push(number(&rec[x], path, row + 1)?);
        values.push(number(&rec[y], path, row + 1)?);
    }
    let points = Array2::from_shape_vec((labels.len(), 2), values).expect("row-major fill");
    Ok(Projection2D { points, labels })
}

pub(crate) fn write_assignments(
    path: &Path,
    labels: &[String],
    clusters: &[usize],
    points: Option<&Array2<f64>>,
) -> Result<(), CliError> {
    analysis::write_assignments_csv(create(path)?, labels, clusters, points.map(|p| p.view()))?;
    Ok(())
}
