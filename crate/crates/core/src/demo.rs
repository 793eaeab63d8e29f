//! Demonstration sessions: keypoint entry, straight-line segment planning
//! with collision feedback, hand mirroring, keyframe extraction and the
//! final demonstration record.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::RigidTransform;
use crate::handtrack::{gripper_state, GripperState, HandTrack, HysteresisBand};
use crate::kinematics::{forward_kinematics, inverse_kinematics, IkOptions, JointState, KinematicChain, KinematicsError};
use crate::scene::{collide, VoxelGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemoError {
    #[error("keypoint is unreachable: {0}")]
    UnreachableKeypoint(KinematicsError),
    #[error("planning failed: {0}")]
    PlanningFailed(String),
    #[error("planning cancelled")]
    Cancelled,
    #[error("no hand sample could be reached")]
    AllSamplesUnreachable,
    #[error("hand track is empty")]
    EmptyTrack,
    #[error("session has no trajectory")]
    EmptySession,
    #[error("language goal is not set")]
    MissingGoal,
    #[error("session is finalized")]
    Finalized,
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionMode {
    /// 3-D points picked in the scene.
    Pointing,
    /// Full 6-DoF pose entry.
    Gui,
    /// Mirroring a tracked hand.
    Kinesthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPoint {
    pub target: RigidTransform,
    pub gripper_command: GripperState,
    pub solved_q: JointState,
    /// Seconds to hold at the target after arriving.
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: JointState,
    pub gripper: GripperState,
    /// Robot touches the scene at this sample.
    pub collision: bool,
    /// IK failed here and `q` was carried over from the previous sample.
    pub ik_failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn collision_count(&self) -> usize {
        self.samples.iter().filter(|s| s.collision).count()
    }

    pub fn grippers(&self) -> Vec<GripperState> {
        self.samples.iter().map(|s| s.gripper).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    /// Index into the trajectory.
    pub index: usize,
    pub t: f64,
    pub tcp: RigidTransform,
    pub gripper: GripperState,
    pub q: JointState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub language_goal: String,
    pub scene_ref: String,
    pub mode: InteractionMode,
    pub base_pose: RigidTransform,
    pub keypoints: Vec<KeyPoint>,
    pub trajectory: Trajectory,
    pub keyframes: Vec<KeyFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    /// TCP translation between waypoints, meters.
    pub cartesian_step: f64,
    /// TCP rotation between waypoints, radians.
    pub angular_step: f64,
    /// Largest joint change between consecutive samples, radians.
    pub max_joint_jump: f64,
    /// Time between samples, seconds.
    pub sample_dt: f64,
    pub ik: IkOptions,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self { cartesian_step: 0.01, angular_step: 0.05, max_joint_jump: 0.2, sample_dt: 1.0 / 30.0, ik: IkOptions::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeOptions {
    /// Joint speed below which the arm counts as stopped, rad/s.
    pub vel_eps: f64,
    /// Samples required between a previous keyframe and a new stop keyframe.
    pub min_gap: usize,
}

impl Default for KeyframeOptions {
    fn default() -> Self {
        Self { vel_eps: 0.01, min_gap: 5 }
    }
}

/// Gripper state encoded in a joint state's aperture.
pub fn gripper_of(chain: &KinematicChain, q: &JointState) -> GripperState {
    if q.gripper_aperture >= 0.5 * chain.max_aperture {
        GripperState::Open
    } else {
        GripperState::Closed
    }
}

pub fn aperture_for(chain: &KinematicChain, g: GripperState) -> f64 {
    match g {
        GripperState::Open => chain.max_aperture,
        GripperState::Closed => 0.0,
    }
}

/// TCP orientation pointing its z axis against the support normal, with x
/// aligned as closely as possible to the base x axis.
pub fn top_down_orientation(plane_normal: &Vector3<f64>, base_pose: &RigidTransform) -> UnitQuaternion<f64> {
    let z = -plane_normal.normalize();
    let mut x = base_pose.apply_vector(&Vector3::x());
    x -= z * x.dot(&z);
    if x.norm() < 1e-6 {
        x = base_pose.apply_vector(&Vector3::y());
        x -= z * x.dot(&z);
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointInput {
    /// Position only; orientation defaults to top-down.
    Point([f64; 3]),
    Pose(RigidTransform),
}

/// Completes a keypoint input to a TCP pose and solves IK from `current`.
pub fn add_keypoint(
    chain: &KinematicChain,
    current: &JointState,
    plane_normal: &Vector3<f64>,
    input: &KeypointInput,
    gripper_command: GripperState,
    dwell: f64,
    ik: &IkOptions,
) -> Result<KeyPoint, DemoError> {
    let target = match input {
        KeypointInput::Point(p) => {
            RigidTransform::new(top_down_orientation(plane_normal, &chain.base_pose), Vector3::from(*p))
        }
        KeypointInput::Pose(t) => *t,
    };
    let sol = inverse_kinematics(chain, &target, current, ik).map_err(DemoError::UnreachableKeypoint)?;
    let mut solved_q = sol.state;
    solved_q.gripper_aperture = aperture_for(chain, gripper_command);
    Ok(KeyPoint { target, gripper_command, solved_q, dwell: dwell.max(0.0) })
}

fn cancelled(cancel: Option<&AtomicBool>) -> bool {
    cancel.is_some_and(|c| c.load(Ordering::Relaxed))
}

fn is_colliding(chain: &KinematicChain, q: &JointState, grid: Option<&VoxelGrid>) -> Result<bool, DemoError> {
    match grid {
        None => Ok(false),
        Some(g) => Ok(!collide(chain, q, g).map_err(|e| DemoError::PlanningFailed(e.to_string()))?.is_collision_free()),
    }
}

/// Plans from `from_q` to the keypoint along a straight TCP line, with IK
/// per waypoint seeded by the previous one. Sub-spans where IK fails or the
/// joints would jump too far are bridged by joint-space interpolation.
/// Every sample is collision-checked; contacts are flagged, not rejected.
pub fn plan_segment(
    chain: &KinematicChain,
    from_q: &JointState,
    to: &KeyPoint,
    grid: Option<&VoxelGrid>,
    opts: &PlanOptions,
    cancel: Option<&AtomicBool>,
) -> Result<Trajectory, DemoError> {
    if !chain.within_limits(from_q) {
        return Err(DemoError::PlanningFailed("start configuration violates joint limits".into()));
    }
    if !chain.within_limits(&to.solved_q) {
        return Err(DemoError::PlanningFailed("keypoint configuration violates joint limits".into()));
    }
    let start = forward_kinematics(chain, from_q, true)?.tcp;
    let goal = to.target;
    let from_gripper = gripper_of(chain, from_q);
    let dist = (goal.translation - start.translation).norm();
    let angle = start.rotation_angle_to(&goal);

    let mut path: Vec<JointState> = Vec::new();
    if dist < opts.ik.pos_tol && angle < opts.ik.rot_tol && from_q.max_abs_diff(&to.solved_q) <= opts.max_joint_jump {
        path.push(to.solved_q.clone());
    } else {
        let steps = ((dist / opts.cartesian_step.max(1e-6)).ceil())
            .max((angle / opts.angular_step.max(1e-6)).ceil())
            .max(1.0) as usize;
        // Anchors: Some(q) where IK produced a usable configuration.
        let mut anchors: Vec<Option<JointState>> = Vec::with_capacity(steps + 1);
        anchors.push(Some(from_q.clone()));
        let mut prev = from_q.clone();
        for i in 1..steps {
            if cancelled(cancel) {
                return Err(DemoError::Cancelled);
            }
            let s = i as f64 / steps as f64;
            let pose = RigidTransform::new(
                start.rotation.slerp(&goal.rotation, s),
                start.translation.lerp(&goal.translation, s),
            );
            match inverse_kinematics(chain, &pose, &prev, &opts.ik) {
                Ok(sol) if sol.state.max_abs_diff(&prev) <= opts.max_joint_jump => {
                    prev = sol.state.clone();
                    anchors.push(Some(sol.state));
                }
                _ => anchors.push(None),
            }
        }
        anchors.push(Some(to.solved_q.clone()));

        // Joint-space bridge over IK gaps.
        let mut filled: Vec<JointState> = Vec::with_capacity(anchors.len());
        let mut i = 0;
        while i < anchors.len() {
            match &anchors[i] {
                Some(q) => {
                    filled.push(q.clone());
                    i += 1;
                }
                None => {
                    let a = filled.last().cloned().expect("first anchor is the start");
                    let j = (i..anchors.len()).find(|&j| anchors[j].is_some()).expect("last anchor is the goal");
                    let b = anchors[j].as_ref().unwrap();
                    let span = j - (i - 1);
                    for k in 1..span {
                        filled.push(a.lerp(b, k as f64 / span as f64));
                    }
                    i = j;
                }
            }
        }
        // Subdivide any remaining large jumps.
        for w in filled.windows(2) {
            let jump = w[0].max_abs_diff(&w[1]);
            let parts = (jump / opts.max_joint_jump.max(1e-6)).ceil().max(1.0) as usize;
            if path.is_empty() {
                path.push(w[0].clone());
            }
            for k in 1..=parts {
                path.push(w[0].lerp(&w[1], k as f64 / parts as f64));
            }
        }
    }
    let arrival = path.len() - 1;
    let dwell_samples = (to.dwell / opts.sample_dt).ceil() as usize;
    for _ in 0..dwell_samples {
        path.push(to.solved_q.clone());
    }

    let mut samples = Vec::with_capacity(path.len());
    for (i, mut q) in path.into_iter().enumerate() {
        if cancelled(cancel) {
            return Err(DemoError::Cancelled);
        }
        let gripper = if i >= arrival { to.gripper_command } else { from_gripper };
        q.gripper_aperture = aperture_for(chain, gripper);
        chain.clamp(&mut q);
        let collision = is_colliding(chain, &q, grid)?;
        samples.push(TrajectorySample { t: i as f64 * opts.sample_dt, q, gripper, collision, ik_failed: false });
    }
    Ok(Trajectory { samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimicOptions {
    pub ik: IkOptions,
    pub band: HysteresisBand,
    /// Skip collision checks (throughput measurements).
    pub skip_collisions: bool,
}

impl Default for MimicOptions {
    fn default() -> Self {
        Self { ik: IkOptions::default(), band: HysteresisBand::default(), skip_collisions: false }
    }
}

/// Retargets a hand track onto the arm: each sample's IK target is the palm
/// frame composed with `offset`, seeded by the previous solution. Failed
/// samples hold the previous configuration and are flagged.
pub fn mimic_hand(
    chain: &KinematicChain,
    track: &HandTrack,
    offset: &RigidTransform,
    grid: Option<&VoxelGrid>,
    seed: &JointState,
    opts: &MimicOptions,
) -> Result<Trajectory, DemoError> {
    if track.is_empty() {
        return Err(DemoError::EmptyTrack);
    }
    let grippers = gripper_state(&track.apertures(), &opts.band);
    let mut prev = seed.clone();
    chain.clamp(&mut prev);
    let mut reached = 0;
    let mut samples = Vec::with_capacity(track.len());
    for (s, g) in track.samples.iter().zip(grippers) {
        let solved = if s.valid {
            inverse_kinematics(chain, &s.frame.compose(offset), &prev, &opts.ik).ok()
        } else {
            None
        };
        let ik_failed = solved.is_none();
        let mut q = solved.map(|sol| sol.state).unwrap_or_else(|| prev.clone());
        if !ik_failed {
            reached += 1;
        }
        q.gripper_aperture = aperture_for(chain, g);
        let collision = if opts.skip_collisions { false } else { is_colliding(chain, &q, grid)? };
        prev = q.clone();
        samples.push(TrajectorySample { t: s.timestamp, q, gripper: g, collision, ik_failed });
    }
    if reached == 0 {
        return Err(DemoError::AllSamplesUnreachable);
    }
    Ok(Trajectory { samples })
}

/// Per-sample joint speed (max over joints), central differences inside,
/// one-sided at the ends.
pub fn joint_speeds(traj: &Trajectory) -> Vec<f64> {
    let s = &traj.samples;
    let n = s.len();
    (0..n)
        .map(|i| {
            if n < 2 {
                return 0.0;
            }
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let dt = s[b].t - s[a].t;
            if dt <= 0.0 {
                return 0.0;
            }
            s[a].q.max_abs_diff(&s[b].q) / dt
        })
        .collect()
}

/// Selects keyframes: first and last samples, every gripper change, every
/// index in `forced`, and one sample per interior stop. A stop is a maximal
/// run of samples slower than `vel_eps` that touches neither end of the
/// trajectory; its keyframe is the slowest sample (middle of ties), kept
/// only if at least `min_gap` samples follow the previous keyframe.
pub fn extract_keyframes(
    chain: &KinematicChain,
    traj: &Trajectory,
    gripper: &[GripperState],
    forced: &[usize],
    opts: &KeyframeOptions,
) -> Result<Vec<KeyFrame>, DemoError> {
    let n = traj.len();
    if n == 0 {
        return Err(DemoError::EmptySession);
    }
    let speeds = joint_speeds(traj);
    let mut stop_pick = vec![false; n];
    let mut i = 0;
    while i < n {
        if speeds[i] >= opts.vel_eps {
            i += 1;
            continue;
        }
        let a = i;
        while i < n && speeds[i] < opts.vel_eps {
            i += 1;
        }
        let b = i - 1;
        if a == 0 || b == n - 1 {
            continue;
        }
        let min = speeds[a..=b].iter().copied().fold(f64::INFINITY, f64::min);
        let ties: Vec<usize> = (a..=b).filter(|&k| speeds[k] == min).collect();
        stop_pick[ties[(ties.len() - 1) / 2]] = true;
    }

    let mut out: Vec<KeyFrame> = Vec::new();
    let mut last: Option<usize> = None;
    for i in 0..n {
        let changed = i > 0 && gripper.get(i) != gripper.get(i - 1);
        let must = i == 0 || i == n - 1 || changed || forced.contains(&i);
        let stop = stop_pick[i] && last.is_none_or(|l| i - l >= opts.min_gap);
        if must || stop {
            let s = &traj.samples[i];
            let tcp = forward_kinematics(chain, &s.q, false)?.tcp;
            out.push(KeyFrame {
                index: i,
                t: s.t,
                tcp,
                gripper: gripper.get(i).copied().unwrap_or(s.gripper),
                q: s.q.clone(),
            });
            last = Some(i);
        }
    }
    Ok(out)
}

/// Single-writer demonstration session. Previews are computed from an
/// immutable borrow; only [`DemoSession::accept_segment`] and
/// [`DemoSession::finalize`] mutate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSession {
    pub scene_ref: String,
    pub mode: InteractionMode,
    pub base_pose: RigidTransform,
    pub plane_normal: Vector3<f64>,
    pub current_q: JointState,
    pub keypoints: Vec<KeyPoint>,
    pub trajectory: Trajectory,
    /// Trajectory indices where keypoints were reached.
    pub arrivals: Vec<usize>,
    pub segments: usize,
    pub language_goal: Option<String>,
    pub finalized: Option<Demonstration>,
    pub keyframe_options: KeyframeOptions,
}

impl DemoSession {
    pub fn new(
        chain: &KinematicChain,
        scene_ref: impl Into<String>,
        plane_normal: Vector3<f64>,
        mode: InteractionMode,
    ) -> Self {
        Self {
            scene_ref: scene_ref.into(),
            mode,
            base_pose: chain.base_pose,
            plane_normal,
            current_q: chain.home_state(),
            keypoints: Vec::new(),
            trajectory: Trajectory::default(),
            arrivals: Vec::new(),
            segments: 0,
            language_goal: None,
            finalized: None,
            keyframe_options: KeyframeOptions::default(),
        }
    }

    pub fn add_keypoint(
        &self,
        chain: &KinematicChain,
        input: &KeypointInput,
        gripper: GripperState,
        dwell: f64,
        ik: &IkOptions,
    ) -> Result<KeyPoint, DemoError> {
        add_keypoint(chain, &self.current_q, &self.plane_normal, input, gripper, dwell, ik)
    }

    pub fn preview_keypoint(
        &self,
        chain: &KinematicChain,
        keypoint: &KeyPoint,
        grid: Option<&VoxelGrid>,
        opts: &PlanOptions,
        cancel: Option<&AtomicBool>,
    ) -> Result<Trajectory, DemoError> {
        plan_segment(chain, &self.current_q, keypoint, grid, opts, cancel)
    }

    /// Appends an accepted segment. A leading sample identical to the
    /// current end of the trajectory is dropped; times are shifted to
    /// continue the trajectory.
    pub fn accept_segment(&mut self, keypoint: Option<KeyPoint>, segment: Trajectory, sample_dt: f64) -> Result<(), DemoError> {
        if self.finalized.is_some() {
            return Err(DemoError::Finalized);
        }
        if segment.is_empty() {
            return Err(DemoError::PlanningFailed("empty segment".into()));
        }
        let mut samples = segment.samples;
        if let (Some(last), Some(first)) = (self.trajectory.samples.last(), samples.first()) {
            if last.q == first.q && last.gripper == first.gripper {
                samples.remove(0);
            }
        }
        let t0 = self.trajectory.samples.last().map(|s| s.t + sample_dt).unwrap_or(0.0);
        let seg_t0 = samples.first().map(|s| s.t).unwrap_or(0.0);
        let arrival_offset = keypoint.as_ref().and_then(|kp| {
            samples.iter().position(|s| s.q.angles == kp.solved_q.angles && s.gripper == kp.gripper_command)
        });
        let base = self.trajectory.len();
        for mut s in samples {
            s.t = t0 + (s.t - seg_t0);
            self.trajectory.samples.push(s);
        }
        if let Some(kp) = keypoint {
            self.arrivals.push(base + arrival_offset.unwrap_or(0).min(self.trajectory.len() - base - 1));
            self.keypoints.push(kp);
        }
        if let Some(last) = self.trajectory.samples.last() {
            self.current_q = last.q.clone();
        }
        self.segments += 1;
        Ok(())
    }

    /// Builds the immutable demonstration. Idempotent: later calls return
    /// the first result.
    pub fn finalize(&mut self, chain: &KinematicChain, language_goal: Option<&str>) -> Result<Demonstration, DemoError> {
        if let Some(done) = &self.finalized {
            return Ok(done.clone());
        }
        if self.segments == 0 || self.trajectory.is_empty() {
            return Err(DemoError::EmptySession);
        }
        if let Some(g) = language_goal {
            self.language_goal = Some(g.to_string());
        }
        let goal = self.language_goal.clone().ok_or(DemoError::MissingGoal)?;
        let keyframes = extract_keyframes(
            chain,
            &self.trajectory,
            &self.trajectory.grippers(),
            &self.arrivals,
            &self.keyframe_options,
        )?;
        let demo = Demonstration {
            language_goal: goal,
            scene_ref: self.scene_ref.clone(),
            mode: self.mode,
            base_pose: self.base_pose,
            keypoints: self.keypoints.clone(),
            trajectory: self.trajectory.clone(),
            keyframes,
        };
        self.finalized = Some(demo.clone());
        Ok(demo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handtrack::HandPose6D;
    use crate::kinematics::testing::planar_two_link;

    fn chain() -> KinematicChain {
        KinematicChain::franka_style()
    }

    fn tcp(chain: &KinematicChain, q: &JointState) -> RigidTransform {
        forward_kinematics(chain, q, false).unwrap().tcp
    }

    #[test]
    fn top_down_points_against_normal() {
        let q = top_down_orientation(&Vector3::z(), &RigidTransform::identity());
        let z = q * Vector3::z();
        assert!((z - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let x = q * Vector3::x();
        assert!((x - Vector3::x()).norm() < 1e-12);
    }

    #[test]
    fn keypoint_in_front_of_base_on_table() {
        let c = chain();
        let home = c.home_state();
        let input = KeypointInput::Point([0.4, 0.0, 0.02]);
        let kp = add_keypoint(&c, &home, &Vector3::z(), &input, GripperState::Open, 0.0, &IkOptions::default()).unwrap();
        let reached = tcp(&c, &kp.solved_q);
        assert!((reached.translation - kp.target.translation).norm() < 1e-4);
        assert!(reached.rotation_angle_to(&kp.target) < 1e-3);
        assert!(c.within_limits(&kp.solved_q));
    }

    #[test]
    fn far_keypoint_unreachable() {
        let c = chain();
        let input = KeypointInput::Point([10.0, 0.0, 0.0]);
        let err = add_keypoint(&c, &c.home_state(), &Vector3::z(), &input, GripperState::Open, 0.0, &IkOptions::default());
        assert!(matches!(err, Err(DemoError::UnreachableKeypoint(_))));
    }

    #[test]
    fn keypoint_at_current_tcp_keeps_q() {
        let c = chain();
        let home = c.home_state();
        let input = KeypointInput::Pose(tcp(&c, &home));
        let kp = add_keypoint(&c, &home, &Vector3::z(), &input, GripperState::Open, 0.0, &IkOptions::default()).unwrap();
        assert!(kp.solved_q.max_abs_diff(&home) < 1e-12);
        let seg = plan_segment(&c, &home, &kp, None, &PlanOptions::default(), None).unwrap();
        assert_eq!(seg.len(), 1);
    }

    #[test]
    fn straight_reach_is_collinear() {
        let c = chain();
        let home = c.home_state();
        let start = tcp(&c, &home);
        let goal = RigidTransform::new(start.rotation, start.translation + Vector3::new(0.2, 0.0, 0.0));
        let kp = add_keypoint(&c, &home, &Vector3::z(), &KeypointInput::Pose(goal), GripperState::Open, 0.0, &IkOptions::default()).unwrap();
        let seg = plan_segment(&c, &home, &kp, None, &PlanOptions::default(), None).unwrap();
        assert!(seg.len() >= 20);
        assert_eq!(seg.collision_count(), 0);
        let dir = Vector3::x();
        for s in &seg.samples {
            assert!(c.within_limits(&s.q));
            let p = tcp(&c, &s.q).translation - start.translation;
            let off = (p - dir * p.dot(&dir)).norm();
            assert!(off < 1e-3, "off-line by {off}");
        }
        for w in seg.samples.windows(2) {
            assert!(w[0].q.max_abs_diff(&w[1].q) <= 0.2 + 1e-12);
            assert!(w[1].t > w[0].t);
        }
    }

    #[test]
    fn blocked_path_flags_crossing() {
        let c = chain();
        let home = c.home_state();
        let start = tcp(&c, &home);
        let goal = RigidTransform::new(start.rotation, start.translation + Vector3::new(0.2, 0.0, 0.0));
        let kp = add_keypoint(&c, &home, &Vector3::z(), &KeypointInput::Pose(goal), GripperState::Open, 0.0, &IkOptions::default()).unwrap();
        // A 2 cm block centred on the line halfway along the reach.
        let mid = start.translation + Vector3::new(0.1, 0.0, 0.0);
        let res = 0.01;
        let origin = mid - Vector3::repeat(0.01);
        let mut grid = VoxelGrid::empty(origin, res, [2, 2, 2]).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    grid.set_occupied([x, y, z], true);
                }
            }
        }
        let seg = plan_segment(&c, &home, &kp, Some(&grid), &PlanOptions::default(), None).unwrap();
        // Brute force: a sample collides iff any sphere is within r + half-diagonal of a block voxel.
        let expected: Vec<bool> = seg
            .samples
            .iter()
            .map(|s| {
                crate::scene::world_spheres(&c, &s.q).unwrap().iter().any(|(_, _, center, r)| {
                    (0..8).any(|i| {
                        let v = grid.voxel_center([i & 1, (i >> 1) & 1, (i >> 2) & 1]);
                        (v - center).norm() < *r + grid.half_diagonal()
                    })
                })
            })
            .collect();
        let got: Vec<bool> = seg.samples.iter().map(|s| s.collision).collect();
        assert_eq!(got, expected);
        assert!(seg.collision_count() >= 1);
        let empty = VoxelGrid::empty(origin, res, [2, 2, 2]).unwrap();
        let clean = plan_segment(&c, &home, &kp, Some(&empty), &PlanOptions::default(), None).unwrap();
        assert_eq!(clean.collision_count(), 0);
    }

    #[test]
    fn cancelled_planning() {
        let c = chain();
        let home = c.home_state();
        let start = tcp(&c, &home);
        let goal = RigidTransform::new(start.rotation, start.translation + Vector3::new(0.1, 0.0, 0.0));
        let kp = add_keypoint(&c, &home, &Vector3::z(), &KeypointInput::Pose(goal), GripperState::Open, 0.0, &IkOptions::default()).unwrap();
        let flag = AtomicBool::new(true);
        assert_eq!(plan_segment(&c, &home, &kp, None, &PlanOptions::default(), Some(&flag)), Err(DemoError::Cancelled));
    }

    fn smooth_joint_path(c: &KinematicChain, n: usize) -> Vec<JointState> {
        let home = c.home_state();
        (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                let mut q = home.clone();
                q.angles[0] += 0.4 * (std::f64::consts::PI * s).sin();
                q.angles[1] += 0.2 * s;
                q.angles[3] += 0.3 * s * s;
                q.angles[5] -= 0.2 * s;
                q
            })
            .collect()
    }

    fn track_from_path(c: &KinematicChain, path: &[JointState]) -> HandTrack {
        let samples = path
            .iter()
            .enumerate()
            .map(|(i, q)| HandPose6D { frame: tcp(c, q), aperture: 0.09, valid: true, timestamp: i as f64 / 30.0 })
            .collect();
        HandTrack::new(samples, 30.0).unwrap()
    }

    #[test]
    fn mimic_recovers_generating_path() {
        let c = chain();
        let path = smooth_joint_path(&c, 60);
        let track = track_from_path(&c, &path);
        let traj = mimic_hand(&c, &track, &RigidTransform::identity(), None, &path[0], &MimicOptions::default()).unwrap();
        assert_eq!(traj.len(), 60);
        for (s, q) in traj.samples.iter().zip(&path) {
            assert!(!s.ik_failed);
            let a = tcp(&c, &s.q);
            let b = tcp(&c, q);
            assert!((a.translation - b.translation).norm() < 1e-4);
            assert!(a.rotation_angle_to(&b) < 1e-3);
            assert!(c.within_limits(&s.q));
        }
    }

    #[test]
    fn mimic_single_and_unreachable() {
        let c = chain();
        let home = c.home_state();
        let one = HandTrack::new(
            vec![HandPose6D { frame: tcp(&c, &home), aperture: 0.09, valid: true, timestamp: 0.0 }],
            30.0,
        )
        .unwrap();
        let traj = mimic_hand(&c, &one, &RigidTransform::identity(), None, &home, &MimicOptions::default()).unwrap();
        assert_eq!(traj.len(), 1);
        let far = HandTrack::new(
            (0..3)
                .map(|i| HandPose6D {
                    frame: RigidTransform::from_translation(5.0, 0.0, i as f64),
                    aperture: 0.09,
                    valid: true,
                    timestamp: i as f64,
                })
                .collect(),
            30.0,
        )
        .unwrap();
        assert_eq!(
            mimic_hand(&c, &far, &RigidTransform::identity(), None, &home, &MimicOptions::default()),
            Err(DemoError::AllSamplesUnreachable)
        );
        let empty = HandTrack::new(vec![], 30.0).unwrap();
        assert_eq!(
            mimic_hand(&c, &empty, &RigidTransform::identity(), None, &home, &MimicOptions::default()),
            Err(DemoError::EmptyTrack)
        );
    }

    fn traj_from(angles: impl Fn(usize) -> Vec<f64>, n: usize) -> Trajectory {
        Trajectory {
            samples: (0..n)
                .map(|i| TrajectorySample {
                    t: i as f64 / 30.0,
                    q: JointState::new(angles(i), 0.08),
                    gripper: GripperState::Open,
                    collision: false,
                    ik_failed: false,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_trajectory_keyframes_are_ends() {
        let c = planar_two_link();
        let traj = traj_from(|_| vec![0.1, 0.2], 50);
        let kf = extract_keyframes(&c, &traj, &traj.grippers(), &[], &KeyframeOptions::default()).unwrap();
        assert_eq!(kf.iter().map(|k| k.index).collect::<Vec<_>>(), vec![0, 49]);
    }

    #[test]
    fn gripper_change_is_keyframe() {
        let c = planar_two_link();
        let traj = traj_from(|i| vec![0.01 * i as f64, 0.0], 40);
        let mut g = traj.grippers();
        for s in g.iter_mut().skip(17) {
            *s = GripperState::Closed;
        }
        let kf = extract_keyframes(&c, &traj, &g, &[], &KeyframeOptions::default()).unwrap();
        let idx: Vec<_> = kf.iter().map(|k| k.index).collect();
        assert_eq!(idx, vec![0, 17, 39]);
        assert_eq!(kf[1].gripper, GripperState::Closed);
    }

    #[test]
    fn velocity_plateau_is_keyframe() {
        let c = planar_two_link();
        let m = 37usize;
        let n = 80;
        // Cubic through sample m: speed vanishes there and nowhere else.
        let traj = traj_from(|i| {
            let t = (i as f64 - m as f64) / 30.0;
            vec![8.0 * t * t * t + 0.5, -4.0 * t * t * t]
        }, n);
        // Brute force the expected pick: global minimum of central-difference speed.
        let speeds = joint_speeds(&traj);
        let expected = (1..n - 1).min_by(|&a, &b| speeds[a].total_cmp(&speeds[b])).unwrap();
        assert!(expected.abs_diff(m) <= 1);
        let kf = extract_keyframes(&c, &traj, &traj.grippers(), &[], &KeyframeOptions::default()).unwrap();
        let idx: Vec<_> = kf.iter().map(|k| k.index).collect();
        assert_eq!(idx.len(), 3, "{idx:?}");
        assert!(idx[1].abs_diff(m) <= 1);
    }

    #[test]
    fn session_two_keypoints_finalize() {
        let c = chain();
        let mut session = DemoSession::new(&c, "scene", Vector3::z(), InteractionMode::Pointing);
        let opts = PlanOptions::default();
        for (p, g) in [([0.45, 0.1, 0.15], GripperState::Open), ([0.45, -0.1, 0.15], GripperState::Closed)] {
            let kp = session.add_keypoint(&c, &KeypointInput::Point(p), g, 0.0, &opts.ik).unwrap();
            let seg = session.preview_keypoint(&c, &kp, None, &opts, None).unwrap();
            session.accept_segment(Some(kp), seg, opts.sample_dt).unwrap();
        }
        assert!(matches!(session.clone().finalize(&c, None), Err(DemoError::MissingGoal)));
        let demo = session.finalize(&c, Some("move the block")).unwrap();
        let kf_idx: Vec<_> = demo.keyframes.iter().map(|k| k.index).collect();
        for a in &session.arrivals {
            assert!(kf_idx.contains(a), "arrival {a} missing from {kf_idx:?}");
        }
        assert_eq!(kf_idx.first(), Some(&0));
        assert_eq!(kf_idx.last(), Some(&(demo.trajectory.len() - 1)));
        assert!(demo.trajectory.samples.windows(2).all(|w| w[1].t > w[0].t));
        assert_eq!(session.finalize(&c, Some("other")).unwrap(), demo);
        assert!(matches!(session.accept_segment(None, demo.trajectory.clone(), 0.1), Err(DemoError::Finalized)));
    }

    #[test]
    fn empty_session_cannot_finalize() {
        let c = chain();
        let mut session = DemoSession::new(&c, "scene", Vector3::z(), InteractionMode::Gui);
        assert_eq!(session.finalize(&c, Some("x")), Err(DemoError::EmptySession));
    }
}
