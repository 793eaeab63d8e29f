//! Hand tracking: lift 2-D keypoints to 3-D with depth, build a palm frame,
//! derive open/closed state with hysteresis and smooth the pose stream.
//!
//! Keypoints use the common 21-landmark layout: wrist, then four joints per
//! finger (thumb CMC/MCP/IP/tip, then MCP/PIP/DIP/tip for index, middle,
//! ring and pinky).
//!
//! Palm frame convention: origin at the centroid of wrist, index MCP,
//! middle MCP and pinky MCP; x from wrist to middle MCP; z along
//! x × (pinky MCP − index MCP); y completes the right-handed frame.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{RgbdFrame, RigidTransform};

pub const LANDMARK_COUNT: usize = 21;
pub const WRIST: usize = 0;
pub const THUMB_TIP: usize = 4;
pub const INDEX_MCP: usize = 5;
pub const INDEX_TIP: usize = 8;
pub const MIDDLE_MCP: usize = 9;
pub const PINKY_MCP: usize = 17;

/// Nominal keypoint stream rate, Hz.
pub const NOMINAL_RATE_HZ: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandError {
    #[error("expected {LANDMARK_COUNT} keypoints, got {0}")]
    WrongLandmarkCount(usize),
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("keypoints at t={keypoints} do not match frame at t={frame}")]
    TimestampMismatch { keypoints: f64, frame: f64 },
    #[error("only {0} keypoints could be lifted (need at least 4)")]
    TooFewValidPoints(usize),
    #[error("landmark {0} required for the palm frame is not valid")]
    MissingLandmark(usize),
    #[error("hand keypoints are degenerate")]
    DegenerateHand,
    #[error("hysteresis band needs open_above > close_below")]
    InvalidBand,
    #[error("hand track timestamps must strictly increase")]
    NonMonotonicTrack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandKeypoints2D {
    /// (u, v) pixel coordinates.
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
    pub timestamp: f64,
}

impl HandKeypoints2D {
    pub fn new(points: Vec<[f64; 2]>, confidence: Vec<f64>, timestamp: f64) -> Result<Self, HandError> {
        let kp = Self { points, confidence, timestamp };
        kp.validate()?;
        Ok(kp)
    }

    pub fn validate(&self) -> Result<(), HandError> {
        if self.points.len() != LANDMARK_COUNT {
            return Err(HandError::WrongLandmarkCount(self.points.len()));
        }
        if self.confidence.len() != LANDMARK_COUNT {
            return Err(HandError::WrongLandmarkCount(self.confidence.len()));
        }
        if let Some(c) = self.confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(HandError::InvalidConfidence(*c));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftOptions {
    pub conf_min: f64,
    pub hole_radius_px: u32,
    /// Largest accepted |t_keypoints − t_frame|, seconds.
    pub max_time_offset: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self { conf_min: 0.5, hole_radius_px: 5, max_time_offset: 1.0 / NOMINAL_RATE_HZ }
    }
}

/// World-frame landmarks; entries with `valid[i] == false` are meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedHand {
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    pub timestamp: f64,
}

impl LiftedHand {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn transformed(&self, t: &RigidTransform) -> LiftedHand {
        LiftedHand { points: self.points.iter().map(|p| t.apply(p)).collect(), ..self.clone() }
    }
}

fn window_median(frame: &RgbdFrame, cx: u32, cy: u32, radius: u32) -> Option<f32> {
    let d = &frame.depth;
    let x0 = cx.saturating_sub(radius);
    let y0 = cy.saturating_sub(radius);
    let x1 = (cx + radius).min(d.width - 1);
    let y1 = (cy + radius).min(d.height - 1);
    let mut vals: Vec<f32> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let z = d.at(x, y);
            if z.is_finite() {
                vals.push(z);
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(f32::total_cmp);
    Some(vals[(vals.len() - 1) / 2])
}

/// Unprojects each confident keypoint at the depth of its pixel. Holes are
/// filled with the median valid depth in a square window.
pub fn lift_keypoints(kp: &HandKeypoints2D, frame: &RgbdFrame, opts: &LiftOptions) -> Result<LiftedHand, HandError> {
    kp.validate()?;
    if (kp.timestamp - frame.timestamp).abs() > opts.max_time_offset + 1e-9 {
        return Err(HandError::TimestampMismatch { keypoints: kp.timestamp, frame: frame.timestamp });
    }
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    let mut valid = Vec::with_capacity(LANDMARK_COUNT);
    for (&[u, v], &conf) in kp.points.iter().zip(&kp.confidence) {
        let lifted = (|| {
            if conf < opts.conf_min || !frame.intrinsics.contains(u, v) {
                return None;
            }
            let px = (u.round() as u32).min(frame.width() - 1);
            let py = (v.round() as u32).min(frame.height() - 1);
            let mut z = frame.depth.at(px, py);
            if !z.is_finite() {
                z = window_median(frame, px, py, opts.hole_radius_px)?;
            }
            let p = frame.world_point(u, v, z as f64).ok()?;
            p.iter().all(|c| c.is_finite()).then_some(p)
        })();
        match lifted {
            Some(p) => {
                points.push(p);
                valid.push(true);
            }
            None => {
                points.push(Vector3::zeros());
                valid.push(false);
            }
        }
    }
    let hand = LiftedHand { points, valid, timestamp: kp.timestamp };
    let n = hand.valid_count();
    if n < 4 {
        return Err(HandError::TooFewValidPoints(n));
    }
    Ok(hand)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandPose6D {
    /// Palm frame in world coordinates.
    pub frame: RigidTransform,
    /// Thumb-tip to index-tip distance, meters.
    pub aperture: f64,
    pub valid: bool,
    pub timestamp: f64,
}

const DEGENERATE_EPS: f64 = 1e-6;

pub fn estimate_hand_frame(hand: &LiftedHand) -> Result<HandPose6D, HandError> {
    for idx in [WRIST, INDEX_MCP, MIDDLE_MCP, PINKY_MCP, THUMB_TIP, INDEX_TIP] {
        if !hand.valid.get(idx).copied().unwrap_or(false) {
            return Err(HandError::MissingLandmark(idx));
        }
    }
    let p = &hand.points;
    let origin = (p[WRIST] + p[INDEX_MCP] + p[MIDDLE_MCP] + p[PINKY_MCP]) / 4.0;
    let forward = p[MIDDLE_MCP] - p[WRIST];
    if forward.norm() < DEGENERATE_EPS {
        return Err(HandError::DegenerateHand);
    }
    let x = forward.normalize();
    let across = p[PINKY_MCP] - p[INDEX_MCP];
    let z = x.cross(&across);
    if z.norm() < DEGENERATE_EPS {
        return Err(HandError::DegenerateHand);
    }
    let z = z.normalize();
    let y = z.cross(&x);
    let rot = Matrix3::from_columns(&[x, y, z]);
    let rotation = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot));
    Ok(HandPose6D {
        frame: RigidTransform::new(rotation, origin),
        aperture: (p[THUMB_TIP] - p[INDEX_TIP]).norm(),
        valid: true,
        timestamp: hand.timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperState {
    Open,
    Closed,
}

impl GripperState {
    /// Training-label encoding: 1 = open.
    pub fn as_label(self) -> u8 {
        match self {
            GripperState::Open => 1,
            GripperState::Closed => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HysteresisBand {
    close_below: f64,
    open_above: f64,
}

impl Default for HysteresisBand {
    fn default() -> Self {
        Self { close_below: 0.03, open_above: 0.06 }
    }
}

impl HysteresisBand {
    pub fn new(close_below: f64, open_above: f64) -> Result<Self, HandError> {
        if !(open_above > close_below) {
            return Err(HandError::InvalidBand);
        }
        Ok(Self { close_below, open_above })
    }

    pub fn close_below(&self) -> f64 {
        self.close_below
    }

    pub fn open_above(&self) -> f64 {
        self.open_above
    }
}

/// Open/closed per aperture sample. Starts open; closes below the band,
/// reopens above it.
pub fn gripper_state(apertures: &[f64], band: &HysteresisBand) -> Vec<GripperState> {
    let mut state = GripperState::Open;
    apertures
        .iter()
        .map(|&a| {
            if state == GripperState::Open && a < band.close_below {
                state = GripperState::Closed;
            } else if state == GripperState::Closed && a > band.open_above {
                state = GripperState::Open;
            }
            state
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandTrack {
    pub samples: Vec<HandPose6D>,
    pub nominal_rate: f64,
}

impl HandTrack {
    pub fn new(samples: Vec<HandPose6D>, nominal_rate: f64) -> Result<Self, HandError> {
        if samples.windows(2).any(|w| !(w[1].timestamp > w[0].timestamp)) {
            return Err(HandError::NonMonotonicTrack);
        }
        Ok(Self { samples, nominal_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn apertures(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.aperture).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothOptions {
    /// Exponential smoothing weight of a new translation/aperture sample;
    /// 1 disables smoothing.
    pub alpha: f64,
    /// Slerp fraction toward each new rotation.
    pub rotation_factor: f64,
    /// Samples farther than this from the last accepted position are
    /// treated as outliers, meters.
    pub outlier_jump: f64,
    /// After this many consecutive outliers the filter accepts the new
    /// position as genuine motion.
    pub relock_after: usize,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        Self { alpha: 0.5, rotation_factor: 0.5, outlier_jump: 0.1, relock_after: 3 }
    }
}

/// Outlier rejection followed by exponential smoothing. Outlier samples are
/// replaced by interpolating their accepted neighbours, so the output keeps
/// every timestamp. Invalid samples pass through untouched.
pub fn smooth_track(track: &HandTrack, opts: &SmoothOptions) -> HandTrack {
    let samples = &track.samples;
    let n = samples.len();
    let mut outlier = vec![false; n];
    let mut last: Option<Vector3<f64>> = None;
    let mut run = 0;
    for (i, s) in samples.iter().enumerate() {
        if !s.valid {
            continue;
        }
        match last {
            Some(prev) if (s.frame.translation - prev).norm() > opts.outlier_jump && run < opts.relock_after => {
                outlier[i] = true;
                run += 1;
            }
            _ => {
                last = Some(s.frame.translation);
                run = 0;
            }
        }
    }

    let accepted = |i: usize| samples[i].valid && !outlier[i];
    let mut measured: Vec<HandPose6D> = samples.clone();
    for i in (0..n).filter(|&i| outlier[i]) {
        let prev = (0..i).rev().find(|&j| accepted(j));
        let next = (i + 1..n).find(|&j| accepted(j));
        let (frame, aperture) = match (prev, next) {
            (Some(a), Some(b)) => {
                let (sa, sb) = (&samples[a], &samples[b]);
                let s = (samples[i].timestamp - sa.timestamp) / (sb.timestamp - sa.timestamp);
                let t = sa.frame.translation.lerp(&sb.frame.translation, s);
                let r = sa.frame.rotation.slerp(&sb.frame.rotation, s);
                (RigidTransform::new(r, t), sa.aperture + (sb.aperture - sa.aperture) * s)
            }
            (Some(a), None) => (samples[a].frame, samples[a].aperture),
            (None, Some(b)) => (samples[b].frame, samples[b].aperture),
            (None, None) => (samples[i].frame, samples[i].aperture),
        };
        measured[i].frame = frame;
        measured[i].aperture = aperture;
    }

    let alpha = opts.alpha.clamp(0.0, 1.0);
    let rf = opts.rotation_factor.clamp(0.0, 1.0);
    let mut state: Option<(Vector3<f64>, UnitQuaternion<f64>, f64)> = None;
    let out = measured
        .into_iter()
        .map(|mut s| {
            if !s.valid {
                return s;
            }
            let next = match state {
                None => (s.frame.translation, s.frame.rotation, s.aperture),
                Some((t, r, a)) => (
                    t + (s.frame.translation - t) * alpha,
                    r.slerp(&s.frame.rotation, rf),
                    a + (s.aperture - a) * alpha,
                ),
            };
            state = Some(next);
            s.frame = RigidTransform::new(next.1, next.0);
            s.aperture = next.2;
            s
        })
        .collect();
    HandTrack { samples: out, nominal_rate: track.nominal_rate }
}

/// A flat, open hand whose palm frame is exactly `palm` and whose thumb and
/// index tips are `aperture` apart. Used to script synthetic sessions.
pub fn synthetic_landmarks(palm: &RigidTransform, aperture: f64) -> Vec<Vector3<f64>> {
    let mut pts = vec![Vector3::zeros(); LANDMARK_COUNT];
    pts[WRIST] = Vector3::new(-0.09, 0.0, 0.0);
    for (mcp, y) in [(INDEX_MCP, -0.03), (MIDDLE_MCP, 0.0), (13, 0.015), (PINKY_MCP, 0.03)] {
        for k in 0..4 {
            pts[mcp + k] = Vector3::new(0.03 + 0.025 * k as f64, y, 0.0);
        }
    }
    pts[1] = Vector3::new(-0.05, -0.04, 0.0);
    pts[2] = Vector3::new(-0.02, -0.055, 0.0);
    pts[3] = Vector3::new(0.01, -0.06, 0.0);
    pts[THUMB_TIP] = pts[INDEX_TIP] - Vector3::new(0.0, aperture, 0.0);
    pts.iter().map(|p| palm.apply(p)).collect()
}
