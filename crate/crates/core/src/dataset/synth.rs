//! Deterministic kinematic walkers used as a stand-in for recorded gait.
//!
//! Each subject follows sinusoidal joint programs: hips swing at the gait
//! frequency, knees flex during swing, arms swing in antiphase with the
//! legs and the trunk is pitched by a constant lean. Positions are
//! generated in the world frame (z up) while the walker follows a slowly
//! curving path, so normalization has real work to do.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaptureTrack, DatasetError};
use crate::skeleton::{JointId, SkeletonFrame, JOINT_COUNT};

pub const FRAME_RATE: f64 = 30.0;

const BODY_HEIGHT: f64 = 1.75;
const HIP_FLEXION_BIAS: f64 = 0.1;

/// Per-subject gait program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSubjectParams {
    /// Gait-cycle frequency in Hz.
    pub step_frequency: f64,
    /// Peak hip flexion in radians.
    pub stride_amplitude: f64,
    /// Peak shoulder flexion in radians.
    pub arm_swing_amplitude: f64,
    /// Forward trunk pitch in radians.
    pub torso_lean: f64,
    /// Thigh, shank, upper-arm and forearm length multipliers.
    pub limb_length_scales: [f64; 4],
    pub phase_offset: f64,
    /// Joint noise standard deviation as a fraction of body height.
    pub noise_sigma: f64,
}

impl SynthSubjectParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |what: &str| Err(DatasetError::InvalidParams(what.to_string()));
        let all = [
            self.step_frequency,
            self.stride_amplitude,
            self.arm_swing_amplitude,
            self.torso_lean,
            self.phase_offset,
            self.noise_sigma,
        ];
        if all.iter().chain(&self.limb_length_scales).any(|v| !v.is_finite()) {
            return bad("all parameters must be finite");
        }
        if !(0.5..=2.0).contains(&self.step_frequency) {
            return bad("step_frequency must lie in [0.5, 2.0] Hz");
        }
        if self.stride_amplitude < 0.0 || self.arm_swing_amplitude < 0.0 {
            return bad("amplitudes must be non-negative");
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative");
        }
        if self.limb_length_scales.iter().any(|&s| s <= 0.0) {
            return bad("limb_length_scales must be positive");
        }
        if self.torso_lean.abs() >= PI / 3.0 {
            return bad("torso_lean must be below 60 degrees");
        }
        Ok(())
    }

    /// Draws a plausible subject.
    pub fn sample<R: Rng>(rng: &mut R, noise_sigma: f64) -> Self {
        let mut scales = [0.0; 4];
        for s in &mut scales {
            *s = rng.random_range(0.92..1.08);
        }
        Self {
            step_frequency: rng.random_range(0.8..1.3),
            stride_amplitude: rng.random_range(0.25..0.55),
            arm_swing_amplitude: rng.random_range(0.1..0.6),
            torso_lean: rng.random_range(-0.05..0.2),
            limb_length_scales: scales,
            phase_offset: rng.random_range(0.0..TAU),
            noise_sigma,
        }
    }

    /// `count` subjects drawn from one seed.
    pub fn sample_many(count: usize, noise_sigma: f64, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::sample(&mut rng, noise_sigma)).collect()
    }
}

pub fn subject_label(index: usize) -> String {
    format!("S{:02}", index + 1)
}

struct Segments {
    thigh: f64,
    shank: f64,
    upper_arm: f64,
    forearm: f64,
}

/// World-frame joint positions for one instant.
fn pose(
    p: &SynthSubjectParams,
    seg: &Segments,
    t: f64,
    root_xy: [f64; 2],
    heading: f64,
) -> [[f64; 3]; JOINT_COUNT] {
    let h = BODY_HEIGHT;
    let phi = TAU * p.step_frequency * t + p.phase_offset;
    let up = Vector3::z();
    let fwd = Vector3::new(heading.cos(), heading.sin(), 0.0);
    let left = Vector3::new(-heading.sin(), heading.cos(), 0.0);
    let yawed = |angle: f64| left * angle.cos() - fwd * angle.sin();
    let swing = |angle: f64| fwd * angle.sin() - up * angle.cos();

    let a = p.stride_amplitude;
    let leg = seg.thigh + seg.shank;
    let pelvis = Vector3::new(root_xy[0], root_xy[1], 0.04 * h + 0.97 * leg + 0.012 * h * (2.0 * phi).cos())
        + left * (0.015 * h * phi.sin());

    let pelvis_yaw = 0.3 * a * phi.sin();
    let hip_axis = yawed(pelvis_yaw);
    let hip_half = 0.05 * h;
    let left_hip = pelvis + hip_axis * hip_half;
    let right_hip = pelvis - hip_axis * hip_half;

    let leg_chain = |hip: Vector3<f64>, phase: f64| {
        let theta = HIP_FLEXION_BIAS + a * phase.sin();
        let kappa = 0.08 + 1.4 * a * phase.cos().max(0.0).powi(2);
        let knee = hip + swing(theta) * seg.thigh;
        let ankle = knee + swing(theta - kappa) * seg.shank;
        (knee, ankle)
    };
    let (left_knee, left_ankle) = leg_chain(left_hip, phi);
    let (right_knee, right_ankle) = leg_chain(right_hip, phi + PI);

    let trunk = (up * p.torso_lean.cos() + fwd * p.torso_lean.sin() + left * (0.03 * phi.sin())).normalize();
    let neck = pelvis + trunk * (0.29 * h);
    let shoulder_axis = yawed(-0.5 * pelvis_yaw);
    let shoulder_base = neck - trunk * (0.02 * h);
    let left_shoulder = shoulder_base + shoulder_axis * (0.13 * h);
    let right_shoulder = shoulder_base - shoulder_axis * (0.13 * h);

    let arm = p.arm_swing_amplitude;
    let arm_chain = |shoulder: Vector3<f64>, side: Vector3<f64>, phase: f64| {
        let alpha = arm * phase.sin();
        let elbow_flex = 0.25 + 0.5 * arm * (1.0 + phase.sin()) * 0.5;
        let elbow = shoulder + (swing(alpha) + side * 0.1).normalize() * seg.upper_arm;
        let wrist = elbow + swing(alpha + elbow_flex) * seg.forearm;
        (elbow, wrist)
    };
    // arms swing against the leg on the same side
    let (left_elbow, left_wrist) = arm_chain(left_shoulder, left, phi + PI);
    let (right_elbow, right_wrist) = arm_chain(right_shoulder, -left, phi);

    let nose = neck + trunk * (0.09 * h) + fwd * (0.05 * h);
    let eye = |side: f64| nose + up * (0.02 * h) - fwd * (0.015 * h) + left * (side * 0.03 * h);
    let ear = |side: f64| neck + trunk * (0.085 * h) - fwd * (0.005 * h) + left * (side * 0.07 * h);

    let mut joints = [[0.0; 3]; JOINT_COUNT];
    let mut put = |id: JointId, v: Vector3<f64>| joints[id.index()] = [v.x, v.y, v.z];
    put(JointId::Nose, nose);
    put(JointId::LeftEye, eye(1.0));
    put(JointId::RightEye, eye(-1.0));
    put(JointId::LeftEar, ear(1.0));
    put(JointId::RightEar, ear(-1.0));
    put(JointId::Neck, neck);
    put(JointId::LeftShoulder, left_shoulder);
    put(JointId::RightShoulder, right_shoulder);
    put(JointId::LeftElbow, left_elbow);
    put(JointId::RightElbow, right_elbow);
    put(JointId::LeftWrist, left_wrist);
    put(JointId::RightWrist, right_wrist);
    put(JointId::Pelvis, pelvis);
    put(JointId::LeftHip, left_hip);
    put(JointId::RightHip, right_hip);
    put(JointId::LeftKnee, left_knee);
    put(JointId::RightKnee, right_knee);
    put(JointId::LeftAnkle, left_ankle);
    put(JointId::RightAnkle, right_ankle);
    joints
}

/// Generates one fully valid 30 Hz track per subject, labelled `S01`, `S02`, ...
pub fn synth_generate(
    params: &[SynthSubjectParams],
    duration: f64,
    seed: u64,
) -> Result<Vec<CaptureTrack>, DatasetError> {
    if params.is_empty() {
        return Err(DatasetError::InvalidParams("at least one subject is required".into()));
    }
    if !(duration >= 2.0 && duration.is_finite()) {
        return Err(DatasetError::InvalidParams(format!("duration {duration} s is below 2 s")));
    }
    for p in params {
        p.validate()?;
    }
    let frames = (duration * FRAME_RATE).round() as usize;
    let dt = 1.0 / FRAME_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tracks = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let s = &p.limb_length_scales;
        let seg = Segments {
            thigh: 0.245 * BODY_HEIGHT * s[0],
            shank: 0.246 * BODY_HEIGHT * s[1],
            upper_arm: 0.186 * BODY_HEIGHT * s[2],
            forearm: 0.146 * BODY_HEIGHT * s[3],
        };
        let speed = 4.0 * (seg.thigh + seg.shank) * p.stride_amplitude.sin() * p.step_frequency;
        let mut heading = rng.random_range(0.0..TAU);
        let turn_rate = rng.random_range(-0.15..0.15);
        let mut root = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let noise = Normal::new(0.0, p.noise_sigma * BODY_HEIGHT)
            .map_err(|e| DatasetError::InvalidParams(e.to_string()))?;

        let mut out = Vec::with_capacity(frames);
        for k in 0..frames {
            let t = k as f64 * dt;
            let mut joints = pose(p, &seg, t, root, heading);
            if p.noise_sigma > 0.0 {
                for c in joints.iter_mut().flatten() {
                    *c += noise.sample(&mut rng);
                }
            }
            out.push(SkeletonFrame::new(t, joints));
            root[0] += speed * dt * heading.cos();
            root[1] += speed * dt * heading.sin();
            heading += turn_rate * dt;
        }
        tracks.push(CaptureTrack {
            subject: subject_label(i),
            frames: out,
        });
    }
    Ok(tracks)
}
