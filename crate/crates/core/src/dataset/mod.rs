//! Capture ingestion, filtering, windowing into `(J, T, 3)` sequences and
//! train/validation splitting.

mod capture;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::skeleton::{self, SkeletonError, SkeletonFrame, JOINT_COUNT};

pub use capture::{parse_capture, write_capture};
pub use synth::{subject_label, synth_generate, SynthSubjectParams, FRAME_RATE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("input contains no records")]
    EmptyInput,
    #[error("subject {subject}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { subject: String, timestamp: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// All observations of one subject, ordered by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureTrack {
    pub subject: String,
    pub frames: Vec<SkeletonFrame>,
}

/// Maximal run of consecutive usable frames inside a track.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment<'a> {
    pub track_id: usize,
    pub label: &'a str,
    /// Index of the first frame within the track.
    pub start: usize,
    pub frames: &'a [SkeletonFrame],
}

/// Where a sequence came from: track index and first frame index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceSpan {
    pub track: usize,
    pub start: usize,
}

/// Normalized window stored as `(J, T, 3)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSequence {
    data: Vec<f64>,
    seq_len: usize,
    pub label: String,
    pub source: SourceSpan,
}

impl GaitSequence {
    pub fn new(data: Vec<f64>, seq_len: usize, label: String, source: SourceSpan) -> Result<Self, DatasetError> {
        if seq_len < 2 || data.len() != JOINT_COUNT * seq_len * 3 {
            return Err(DatasetError::InvalidArgument(format!(
                "sequence data of length {} does not match ({JOINT_COUNT}, {seq_len}, 3)",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidArgument("sequence contains non-finite values".into()));
        }
        Ok(Self {
            data,
            seq_len,
            label,
            source,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Raw `(J, T, 3)` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, joint: usize, frame: usize, axis: usize) -> f64 {
        self.data[(joint * self.seq_len + frame) * 3 + axis]
    }

    /// Same values in channel-first `(3, J, T)` order.
    pub fn channel_first(&self) -> Vec<f64> {
        let plane = JOINT_COUNT * self.seq_len;
        let mut out = vec![0.0; 3 * plane];
        for (i, xyz) in self.data.chunks_exact(3).enumerate() {
            for (c, &v) in xyz.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<GaitSequence>,
    pub validation: Vec<GaitSequence>,
}

fn usable(frame: &SkeletonFrame) -> bool {
    frame.all_valid() && skeleton::build_orientation_basis(frame).is_ok()
}

/// Splits a track into maximal runs of fully valid, orientable frames.
pub fn filter_complete(track: &CaptureTrack, track_id: usize) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, frame) in track.frames.iter().enumerate() {
        match (usable(frame), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Segment {
                    track_id,
                    label: &track.subject,
                    start: s,
                    frames: &track.frames[s..i],
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Segment {
            track_id,
            label: &track.subject,
            start: s,
            frames: &track.frames[s..],
        });
    }
    out
}

/// Number of windows a segment of `len` frames yields.
pub fn window_count(len: usize, seq_len: usize, stride: usize) -> usize {
    if len < seq_len {
        0
    } else {
        (len - seq_len) / stride + 1
    }
}

/// Cuts segments into windows of `seq_len` frames every `stride` frames and
/// normalizes each frame with the given track height.
pub fn window_segments(
    segments: &[Segment<'_>],
    seq_len: usize,
    stride: usize,
    height: f64,
) -> Result<Vec<GaitSequence>, DatasetError> {
    if seq_len < 2 || stride < 1 {
        return Err(DatasetError::InvalidArgument(format!(
            "need seq_len >= 2 and stride >= 1, got {seq_len} and {stride}"
        )));
    }
    let mut out = Vec::new();
    for seg in segments {
        let normalized = seg
            .frames
            .iter()
            .map(|f| skeleton::normalize_frame(f, height))
            .collect::<Result<Vec<_>, _>>()?;
        for w in 0..window_count(seg.frames.len(), seq_len, stride) {
            let offset = w * stride;
            let mut data = vec![0.0; JOINT_COUNT * seq_len * 3];
            for (t, frame) in normalized[offset..offset + seq_len].iter().enumerate() {
                for (j, p) in frame.joints.iter().enumerate() {
                    data[(j * seq_len + t) * 3..(j * seq_len + t) * 3 + 3].copy_from_slice(p);
                }
            }
            out.push(GaitSequence::new(
                data,
                seq_len,
                seg.label.to_string(),
                SourceSpan {
                    track: seg.track_id,
                    start: seg.start + offset,
                },
            )?);
        }
    }
    Ok(out)
}

/// Filters, normalizes and windows every track. Height is estimated once
/// per track. Tracks without a single fully valid frame are skipped.
pub fn prepare_sequences(
    tracks: &[CaptureTrack],
    seq_len: usize,
    stride: usize,
) -> Result<Vec<GaitSequence>, DatasetError> {
    let mut out = Vec::new();
    for (id, track) in tracks.iter().enumerate() {
        let height = match skeleton::height_estimate(&track.frames) {
            Ok(h) => h,
            Err(SkeletonError::NoValidFrame) => continue,
            Err(e) => return Err(e.into()),
        };
        let segments = filter_complete(track, id);
        out.extend(window_segments(&segments, seq_len, stride, height)?);
    }
    Ok(out)
}

/// Number of validation sequences for a label with `n` sequences.
fn validation_count(n: usize, ratio: f64) -> usize {
    // 1e-9 keeps e.g. (1 - 0.9) * 20 = 2.0000000000000004 from rounding up to 3
    let raw = ((1.0 - ratio) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    raw.min(n - 1)
}

/// Per-label shuffle (labels in sorted order, one seeded stream), then the
/// first `ceil((1 - ratio) n)` sequences of each label go to validation.
pub fn split_train_val(sequences: &[GaitSequence], ratio: f64, seed: u64) -> Result<DatasetSplit, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut by_label: BTreeMap<&str, Vec<&GaitSequence>> = BTreeMap::new();
    for s in sequences {
        by_label.entry(s.label.as_str()).or_default().push(s);
    }
    let short: Vec<&str> = by_label.iter().filter(|(_, v)| v.len() < 2).map(|(k, _)| *k).collect();
    if !short.is_empty() {
        return Err(DatasetError::InsufficientData(format!(
            "labels with fewer than 2 sequences: {}",
            short.join(", ")
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for (_, mut group) in by_label {
        group.shuffle(&mut rng);
        let n_val = validation_count(group.len(), ratio);
        split.validation.extend(group[..n_val].iter().map(|s| (*s).clone()));
        split.train.extend(group[n_val..].iter().map(|s| (*s).clone()));
    }
    Ok(split)
}
