//! 19-joint skeleton model and per-frame pose normalization.
//!
//! A frame is normalized by subtracting the pelvis, dividing by the body
//! height of its track and rotating into a body-fixed basis whose z-axis
//! runs from pelvis to neck and whose x-axis follows the hip line.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of keypoints in the skeleton model.
pub const JOINT_COUNT: usize = 19;

/// Minimum angle between hip axis and spine axis for a usable frame.
pub const MIN_HIP_SPINE_ANGLE_DEG: f64 = 1.0;

const MIN_SPINE_LENGTH: f64 = 1e-6;

/// Keypoint identifiers in their fixed storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum JointId {
    Nose = 0,
    LeftEye = 1,
    RightEye = 2,
    LeftEar = 3,
    RightEar = 4,
    Neck = 5,
    LeftShoulder = 6,
    RightShoulder = 7,
    LeftElbow = 8,
    RightElbow = 9,
    LeftWrist = 10,
    RightWrist = 11,
    Pelvis = 12,
    LeftHip = 13,
    RightHip = 14,
    LeftKnee = 15,
    RightKnee = 16,
    LeftAnkle = 17,
    RightAnkle = 18,
}

impl JointId {
    pub const ALL: [JointId; JOINT_COUNT] = [
        JointId::Nose,
        JointId::LeftEye,
        JointId::RightEye,
        JointId::LeftEar,
        JointId::RightEar,
        JointId::Neck,
        JointId::LeftShoulder,
        JointId::RightShoulder,
        JointId::LeftElbow,
        JointId::RightElbow,
        JointId::LeftWrist,
        JointId::RightWrist,
        JointId::Pelvis,
        JointId::LeftHip,
        JointId::RightHip,
        JointId::LeftKnee,
        JointId::RightKnee,
        JointId::LeftAnkle,
        JointId::RightAnkle,
    ];

    /// Joints that must be valid for a frame to be normalized.
    pub const ANCHORS: [JointId; 4] = [
        JointId::Pelvis,
        JointId::Neck,
        JointId::LeftHip,
        JointId::RightHip,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<JointId> {
        Self::ALL.get(index).copied()
    }

    pub const fn name(self) -> &'static str {
        match self {
            JointId::Nose => "nose",
            JointId::LeftEye => "left-eye",
            JointId::RightEye => "right-eye",
            JointId::LeftEar => "left-ear",
            JointId::RightEar => "right-ear",
            JointId::Neck => "neck",
            JointId::LeftShoulder => "left-shoulder",
            JointId::RightShoulder => "right-shoulder",
            JointId::LeftElbow => "left-elbow",
            JointId::RightElbow => "right-elbow",
            JointId::LeftWrist => "left-wrist",
            JointId::RightWrist => "right-wrist",
            JointId::Pelvis => "pelvis",
            JointId::LeftHip => "left-hip",
            JointId::RightHip => "right-hip",
            JointId::LeftKnee => "left-knee",
            JointId::RightKnee => "right-knee",
            JointId::LeftAnkle => "left-ankle",
            JointId::RightAnkle => "right-ankle",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),
    #[error("no frame with all joints valid")]
    NoValidFrame,
    #[error("height must be positive and finite, got {0}")]
    InvalidHeight(f64),
}

/// One timestamped observation of all joints, in meters, world frame (z up).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFrame {
    pub timestamp: f64,
    pub joints: [[f64; 3]; JOINT_COUNT],
    pub valid: [bool; JOINT_COUNT],
}

impl SkeletonFrame {
    /// A frame with every joint flagged valid.
    pub fn new(timestamp: f64, joints: [[f64; 3]; JOINT_COUNT]) -> Self {
        Self {
            timestamp,
            joints,
            valid: [true; JOINT_COUNT],
        }
    }

    pub fn joint(&self, id: JointId) -> Vector3<f64> {
        Vector3::from(self.joints[id.index()])
    }

    pub fn is_valid(&self, id: JointId) -> bool {
        self.valid[id.index()] && self.joints[id.index()].iter().all(|c| c.is_finite())
    }

    pub fn all_valid(&self) -> bool {
        JointId::ALL.iter().all(|&j| self.is_valid(j))
    }

    /// Vertical extent (max z minus min z) over all joints.
    pub fn vertical_extent(&self) -> f64 {
        let (lo, hi) = self
            .joints
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p[2]), hi.max(p[2]))
            });
        hi - lo
    }

    /// Applies `p -> scale * rotation * p + translation` to every joint.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>, scale: f64) -> Self {
        let mut out = self.clone();
        for p in out.joints.iter_mut() {
            let q = scale * (rotation * Vector3::from(*p)) + translation;
            *p = [q.x, q.y, q.z];
        }
        out
    }
}

/// Joints expressed in the height-normalized body frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedFrame {
    pub joints: [[f64; 3]; JOINT_COUNT],
}

impl NormalizedFrame {
    pub fn joint(&self, id: JointId) -> Vector3<f64> {
        Vector3::from(self.joints[id.index()])
    }
}

/// Rotation from world frame to body frame; rows are the body axes.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationBasis {
    pub rotation: Matrix3<f64>,
}

impl OrientationBasis {
    pub fn x_axis(&self) -> Vector3<f64> {
        self.rotation.row(0).transpose()
    }

    pub fn y_axis(&self) -> Vector3<f64> {
        self.rotation.row(1).transpose()
    }

    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }
}

/// Builds the body basis of a frame: z from pelvis to neck, x along the
/// hip line (left to right) orthogonalized against z, y = z × x.
pub fn build_orientation_basis(frame: &SkeletonFrame) -> Result<OrientationBasis, SkeletonError> {
    if let Some(missing) = JointId::ANCHORS.iter().find(|&&j| !frame.is_valid(j)) {
        return Err(SkeletonError::DegenerateFrame(format!(
            "anchor joint {} is not valid",
            missing.name()
        )));
    }
    let spine = frame.joint(JointId::Neck) - frame.joint(JointId::Pelvis);
    let spine_len = spine.norm();
    if spine_len <= MIN_SPINE_LENGTH {
        return Err(SkeletonError::DegenerateFrame(
            "neck coincides with pelvis".into(),
        ));
    }
    let z = spine / spine_len;

    let hips = frame.joint(JointId::RightHip) - frame.joint(JointId::LeftHip);
    let hip_len = hips.norm();
    let sin_angle = if hip_len > 0.0 {
        hips.cross(&z).norm() / hip_len
    } else {
        0.0
    };
    if sin_angle < MIN_HIP_SPINE_ANGLE_DEG.to_radians().sin() {
        return Err(SkeletonError::DegenerateFrame(
            "hip axis is within 1 degree of the spine axis".into(),
        ));
    }
    let x = (hips - z * hips.dot(&z)).normalize();
    let y = z.cross(&x);

    Ok(OrientationBasis {
        rotation: Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
    })
}

/// Median vertical extent over fully valid frames of a track.
pub fn height_estimate(track: &[SkeletonFrame]) -> Result<f64, SkeletonError> {
    let mut extents: Vec<f64> = track
        .iter()
        .filter(|f| f.all_valid())
        .map(SkeletonFrame::vertical_extent)
        .collect();
    if extents.is_empty() {
        return Err(SkeletonError::NoValidFrame);
    }
    extents.sort_by(f64::total_cmp);
    let mid = extents.len() / 2;
    let median = if extents.len() % 2 == 1 {
        extents[mid]
    } else {
        0.5 * (extents[mid - 1] + extents[mid])
    };
    if median > 0.0 && median.is_finite() {
        Ok(median)
    } else {
        Err(SkeletonError::InvalidHeight(median))
    }
}

/// Maps every joint `p` to `R (p - pelvis) / height`.
pub fn normalize_frame(frame: &SkeletonFrame, height: f64) -> Result<NormalizedFrame, SkeletonError> {
    if !(height > 0.0 && height.is_finite()) {
        return Err(SkeletonError::InvalidHeight(height));
    }
    let basis = build_orientation_basis(frame)?;
    let pelvis = frame.joint(JointId::Pelvis);
    let mut joints = [[0.0; 3]; JOINT_COUNT];
    for (out, p) in joints.iter_mut().zip(frame.joints.iter()) {
        let q = basis.rotation * ((Vector3::from(*p) - pelvis) / height);
        *out = [q.x, q.y, q.z];
    }
    // Exact zero, not merely (p - p) rounded through the rotation.
    joints[JointId::Pelvis.index()] = [0.0; 3];
    Ok(NormalizedFrame { joints })
}
