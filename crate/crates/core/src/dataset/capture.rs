//! JSON-Lines capture files: one skeleton observation per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CaptureTrack, DatasetError};
use crate::skeleton::{SkeletonFrame, JOINT_COUNT};

#[derive(Serialize)]
struct RecordOut<'a> {
    t: f64,
    subject: &'a str,
    joints: &'a [[f64; 3]; JOINT_COUNT],
    valid: &'a [bool; JOINT_COUNT],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    t: f64,
    subject: String,
    joints: Vec<Vec<f64>>,
    valid: Vec<bool>,
}

fn parse_line(line: &str, line_no: usize) -> Result<(String, SkeletonFrame), DatasetError> {
    let err = |reason: String| DatasetError::Parse { line: line_no, reason };
    let rec: RecordIn = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    if rec.joints.len() != JOINT_COUNT {
        return Err(err(format!("expected {JOINT_COUNT} joints, found {}", rec.joints.len())));
    }
    if rec.valid.len() != JOINT_COUNT {
        return Err(err(format!("expected {JOINT_COUNT} validity flags, found {}", rec.valid.len())));
    }
    if !(rec.t.is_finite() && rec.t >= 0.0) {
        return Err(err(format!("timestamp {} must be finite and non-negative", rec.t)));
    }
    let mut joints = [[0.0; 3]; JOINT_COUNT];
    for (i, (dst, src)) in joints.iter_mut().zip(&rec.joints).enumerate() {
        if src.len() != 3 {
            return Err(err(format!("joint {i} has {} coordinates, expected 3", src.len())));
        }
        dst.copy_from_slice(src);
    }
    let mut valid = [false; JOINT_COUNT];
    valid.copy_from_slice(&rec.valid);
    Ok((
        rec.subject,
        SkeletonFrame {
            timestamp: rec.t,
            joints,
            valid,
        },
    ))
}

/// Reads a capture stream into one track per subject, in order of first
/// appearance, with frames sorted by timestamp. Blank lines are skipped.
pub fn parse_capture<R: BufRead>(reader: R) -> Result<Vec<CaptureTrack>, DatasetError> {
    let mut tracks: Vec<CaptureTrack> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DatasetError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let (subject, frame) = parse_line(&line, line_no)?;
        match tracks.iter_mut().find(|t| t.subject == subject) {
            Some(t) => t.frames.push(frame),
            None => tracks.push(CaptureTrack {
                subject,
                frames: vec![frame],
            }),
        }
    }
    if tracks.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    for track in &mut tracks {
        track.frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        if let Some(w) = track.frames.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(DatasetError::DuplicateTimestamp {
                subject: track.subject.clone(),
                timestamp: w[0].timestamp,
            });
        }
    }
    Ok(tracks)
}

/// Writes tracks one frame per line. Numbers use the shortest decimal form
/// that parses back to the identical `f64`.
pub fn write_capture<W: Write>(mut writer: W, tracks: &[CaptureTrack]) -> std::io::Result<()> {
    for track in tracks {
        for f in &track.frames {
            let rec = RecordOut {
                t: f.timestamp,
                subject: &track.subject,
                joints: &f.joints,
                valid: &f.valid,
            };
            serde_json::to_writer(&mut writer, &rec)?;
            writer.write_all(b"\n")?;
        }
    }
    writer.flush()
}
