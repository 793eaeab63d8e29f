//! Serial kinematic chain: description loading, forward kinematics, the
//! geometric Jacobian and damped-least-squares inverse kinematics.

use std::path::Path;

use nalgebra::{DVector, Dyn, Matrix6, OMatrix, Unit, UnitQuaternion, Vector3, Vector6, U6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::RigidTransform;

/// 6×n Jacobian, linear rows first.
pub type Jacobian = OMatrix<f64, U6, Dyn>;

/// Description bundled with the crate.
pub const FRANKA_STYLE_TOML: &str = include_str!("../data/franka_style.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint {joint} at {value} rad violates limits [{lower}, {upper}]")]
    JointLimitViolation { joint: usize, value: f64, lower: f64, upper: f64 },
    #[error("expected {expected} joint values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("target unreachable (position error {position_error:.3e} m, rotation error {rotation_error:.3e} rad)")]
    Unreachable { position_error: f64, rotation_error: f64 },
    #[error("non-finite joint or target values")]
    NonFinite,
    #[error("invalid kinematic description: {0}")]
    InvalidDescription(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointType {
    Revolute,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub joint_type: JointType,
    /// Parent frame to joint frame, applied before the joint rotation.
    pub joint_origin: RigidTransform,
    pub joint_axis: Unit<Vector3<f64>>,
    pub lower_limit: f64,
    pub upper_limit: f64,
    pub collision_spheres: Vec<CollisionSphere>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub name: String,
    pub links: Vec<Link>,
    pub flange_to_tcp: RigidTransform,
    pub base_pose: RigidTransform,
    pub max_aperture: f64,
    home: Vec<f64>,
    /// Upper bound on |tcp − base| over all configurations.
    reach: f64,
}

/// Arm configuration plus gripper opening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointState {
    pub angles: Vec<f64>,
    pub gripper_aperture: f64,
}

impl JointState {
    pub fn new(angles: Vec<f64>, gripper_aperture: f64) -> Self {
        Self { angles, gripper_aperture }
    }

    pub fn dof(&self) -> usize {
        self.angles.len()
    }

    /// Largest per-joint difference in radians.
    pub fn max_abs_diff(&self, other: &JointState) -> f64 {
        self.angles
            .iter()
            .zip(&other.angles)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn lerp(&self, other: &JointState, s: f64) -> JointState {
        JointState {
            angles: self.angles.iter().zip(&other.angles).map(|(a, b)| a + (b - a) * s).collect(),
            gripper_aperture: self.gripper_aperture + (other.gripper_aperture - self.gripper_aperture) * s,
        }
    }
}

// ---- description file ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptionFile {
    format_version: u32,
    name: String,
    max_aperture: f64,
    #[serde(default)]
    home: Option<Vec<f64>>,
    #[serde(default)]
    base_pose: Option<RigidTransform>,
    flange_to_tcp: RigidTransform,
    links: Vec<LinkEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkEntry {
    name: String,
    joint: JointType,
    origin: RigidTransform,
    #[serde(default)]
    axis: Option<[f64; 3]>,
    #[serde(default)]
    limits: Option<[f64; 2]>,
    #[serde(default)]
    spheres: Vec<CollisionSphere>,
}

impl KinematicChain {
    /// The Franka-style arm shipped with the crate.
    pub fn franka_style() -> Self {
        Self::from_toml_str(FRANKA_STYLE_TOML).expect("bundled description is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path).map_err(|e| KinematicsError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, KinematicsError> {
        let desc: DescriptionFile =
            toml::from_str(text).map_err(|e| KinematicsError::InvalidDescription(e.to_string()))?;
        if desc.format_version != 1 {
            return Err(KinematicsError::InvalidDescription(format!(
                "unsupported format_version {}",
                desc.format_version
            )));
        }
        let mut links = Vec::with_capacity(desc.links.len());
        for entry in desc.links {
            let link = match entry.joint {
                JointType::Revolute => {
                    let axis = entry.axis.ok_or_else(|| {
                        KinematicsError::InvalidDescription(format!("revolute joint {} needs an axis", entry.name))
                    })?;
                    let [lower, upper] = entry.limits.ok_or_else(|| {
                        KinematicsError::InvalidDescription(format!("revolute joint {} needs limits", entry.name))
                    })?;
                    let axis = Vector3::from(axis);
                    if !(axis.norm() > 1e-9) {
                        return Err(KinematicsError::InvalidDescription(format!("zero axis on {}", entry.name)));
                    }
                    Link {
                        name: entry.name,
                        joint_type: JointType::Revolute,
                        joint_origin: entry.origin,
                        joint_axis: Unit::new_normalize(axis),
                        lower_limit: lower,
                        upper_limit: upper,
                        collision_spheres: entry.spheres,
                    }
                }
                JointType::Fixed => Link {
                    name: entry.name,
                    joint_type: JointType::Fixed,
                    joint_origin: entry.origin,
                    joint_axis: Vector3::z_axis(),
                    lower_limit: 0.0,
                    upper_limit: 0.0,
                    collision_spheres: entry.spheres,
                },
            };
            links.push(link);
        }
        Self::new(
            desc.name,
            links,
            desc.flange_to_tcp,
            desc.base_pose.unwrap_or_default(),
            desc.max_aperture,
            desc.home,
        )
    }

    pub fn new(
        name: impl Into<String>,
        links: Vec<Link>,
        flange_to_tcp: RigidTransform,
        base_pose: RigidTransform,
        max_aperture: f64,
        home: Option<Vec<f64>>,
    ) -> Result<Self, KinematicsError> {
        let invalid = |m: String| Err(KinematicsError::InvalidDescription(m));
        for link in &links {
            if link.joint_type == JointType::Revolute && !(link.lower_limit < link.upper_limit) {
                return invalid(format!("joint {} has lower limit >= upper limit", link.name));
            }
            if link.collision_spheres.iter().any(|s| !(s.radius > 0.0)) {
                return invalid(format!("link {} has a non-positive sphere radius", link.name));
            }
        }
        if !(max_aperture >= 0.0) {
            return invalid("max_aperture must be non-negative".into());
        }
        let dof = links.iter().filter(|l| l.joint_type == JointType::Revolute).count();
        let home = match home {
            Some(h) if h.len() != dof => {
                return invalid(format!("home has {} values for {} joints", h.len(), dof));
            }
            Some(h) => h,
            None => links
                .iter()
                .filter(|l| l.joint_type == JointType::Revolute)
                .map(|l| 0.0f64.clamp(l.lower_limit, l.upper_limit))
                .collect(),
        };
        let reach = links.iter().map(|l| l.joint_origin.translation.norm()).sum::<f64>()
            + flange_to_tcp.translation.norm();
        let chain = Self { name: name.into(), links, flange_to_tcp, base_pose, max_aperture, home, reach };
        let margins = chain.check_limits(&chain.home_state());
        if let Some((j, _)) = margins.iter().enumerate().find(|(_, m)| **m < 0.0) {
            return invalid(format!("home configuration violates joint {j} limits"));
        }
        Ok(chain)
    }

    pub fn dof(&self) -> usize {
        self.links.iter().filter(|l| l.joint_type == JointType::Revolute).count()
    }

    pub fn revolute_links(&self) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(|l| l.joint_type == JointType::Revolute)
    }

    pub fn home_state(&self) -> JointState {
        JointState::new(self.home.clone(), self.max_aperture)
    }

    /// Upper bound of TCP distance from the base origin.
    pub fn reach(&self) -> f64 {
        self.reach
    }

    pub fn with_base_pose(&self, base_pose: RigidTransform) -> Self {
        Self { base_pose, ..self.clone() }
    }

    /// Distance in radians to the nearest limit per revolute joint.
    /// Negative means the joint is outside its range.
    pub fn check_limits(&self, q: &JointState) -> Vec<f64> {
        self.revolute_links()
            .zip(&q.angles)
            .map(|(l, &a)| (a - l.lower_limit).min(l.upper_limit - a))
            .collect()
    }

    pub fn clamp(&self, q: &mut JointState) {
        for (l, a) in self.revolute_links().zip(q.angles.iter_mut()) {
            *a = a.clamp(l.lower_limit, l.upper_limit);
        }
        q.gripper_aperture = q.gripper_aperture.clamp(0.0, self.max_aperture);
    }

    pub fn within_limits(&self, q: &JointState) -> bool {
        q.dof() == self.dof()
            && self.check_limits(q).iter().all(|m| *m >= 0.0)
            && q.gripper_aperture >= 0.0
            && q.gripper_aperture <= self.max_aperture
    }
}

/// World poses produced by forward kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    /// Pose of each link frame (after its joint), one per entry in `links`.
    pub link_poses: Vec<RigidTransform>,
    /// World position and axis of each revolute joint.
    pub joint_positions: Vec<Vector3<f64>>,
    pub joint_axes: Vec<Vector3<f64>>,
    pub flange: RigidTransform,
    pub tcp: RigidTransform,
}

fn check_dims(chain: &KinematicChain, q: &JointState) -> Result<(), KinematicsError> {
    if q.dof() != chain.dof() {
        return Err(KinematicsError::DimensionMismatch { expected: chain.dof(), got: q.dof() });
    }
    if q.angles.iter().any(|a| !a.is_finite()) {
        return Err(KinematicsError::NonFinite);
    }
    Ok(())
}

/// Forward kinematics. With `check_limits` set, out-of-range joints are an
/// error; previews pass `false`.
pub fn forward_kinematics(chain: &KinematicChain, q: &JointState, check_limits: bool) -> Result<FkResult, KinematicsError> {
    check_dims(chain, q)?;
    if check_limits {
        for (j, (link, &a)) in chain.revolute_links().zip(&q.angles).enumerate() {
            if a < link.lower_limit || a > link.upper_limit {
                return Err(KinematicsError::JointLimitViolation {
                    joint: j,
                    value: a,
                    lower: link.lower_limit,
                    upper: link.upper_limit,
                });
            }
        }
    }
    Ok(fk_unchecked(chain, &q.angles))
}

fn fk_unchecked(chain: &KinematicChain, angles: &[f64]) -> FkResult {
    let dof = chain.dof();
    let mut link_poses = Vec::with_capacity(chain.links.len());
    let mut joint_positions = Vec::with_capacity(dof);
    let mut joint_axes = Vec::with_capacity(dof);
    let mut pose = chain.base_pose;
    let mut next = 0;
    for link in &chain.links {
        pose = pose.compose(&link.joint_origin);
        if link.joint_type == JointType::Revolute {
            let axis_world = pose.apply_vector(&link.joint_axis);
            joint_positions.push(pose.translation);
            joint_axes.push(axis_world);
            let rot = UnitQuaternion::from_axis_angle(&link.joint_axis, angles[next]);
            pose = pose.compose(&RigidTransform::from_rotation(rot));
            next += 1;
        }
        link_poses.push(pose);
    }
    let tcp = pose.compose(&chain.flange_to_tcp);
    FkResult { link_poses, joint_positions, joint_axes, flange: pose, tcp }
}

fn jacobian_from_fk(fk: &FkResult) -> Jacobian {
    let n = fk.joint_axes.len();
    let mut jac = Jacobian::zeros(n);
    let p_tcp = fk.tcp.translation;
    for (j, (axis, pos)) in fk.joint_axes.iter().zip(&fk.joint_positions).enumerate() {
        let lin = axis.cross(&(p_tcp - pos));
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, j).copy_from(axis);
    }
    jac
}

/// Geometric Jacobian about the TCP in the world frame; one column per
/// revolute joint.
pub fn jacobian(chain: &KinematicChain, q: &JointState, check_limits: bool) -> Result<Jacobian, KinematicsError> {
    let fk = forward_kinematics(chain, q, check_limits)?;
    Ok(jacobian_from_fk(&fk))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkOptions {
    pub pos_tol: f64,
    pub rot_tol: f64,
    /// Iteration cap per attempt.
    pub max_iters: usize,
    pub damping: f64,
    /// Extra attempts from pseudo-random configurations after a stall.
    pub restarts: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self { pos_tol: 1e-4, rot_tol: 1e-3, max_iters: 200, damping: 0.05, restarts: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub state: JointState,
    pub iterations: usize,
    pub position_error: f64,
    pub rotation_error: f64,
}

/// Largest joint change per DLS iterate, radians.
const MAX_STEP: f64 = 0.3;
/// An attempt is abandoned when a window of iterations fails to cut the
/// squared error below this fraction of its value at the window start.
const STALL_WINDOW: usize = 20;
const STALL_RATIO: f64 = 0.9;
const RESTART_SEED: u64 = 0x1c0ffee;

/// Pose error as (target − current translation, axis-angle of R_t·R_cᵀ).
pub fn pose_error(target: &RigidTransform, current: &RigidTransform) -> Vector6<f64> {
    let dp = target.translation - current.translation;
    let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

struct Attempt {
    q: JointState,
    iterations: usize,
    position_error: f64,
    rotation_error: f64,
    converged: bool,
}

/// Damped least squares with per-iterate clamping to joint limits.
///
/// The damping factor adapts Levenberg-style: it shrinks after a step that
/// reduces the error and grows (with the step rejected) otherwise, never
/// going below `opts.damping / 8`. An attempt that stalls in a local minimum
/// is restarted from a pseudo-random configuration drawn from a fixed-seed
/// generator, up to `opts.restarts` times, so results stay deterministic.
pub fn inverse_kinematics(
    chain: &KinematicChain,
    target: &RigidTransform,
    seed: &JointState,
    opts: &IkOptions,
) -> Result<IkSolution, KinematicsError> {
    check_dims(chain, seed)?;
    if !target.is_finite() {
        return Err(KinematicsError::NonFinite);
    }
    let mut q = seed.clone();
    chain.clamp(&mut q);

    let fk = fk_unchecked(chain, &q.angles);
    let (pe, re) = error_norms(&pose_error(target, &fk.tcp));
    if pe < opts.pos_tol && re < opts.rot_tol {
        return Ok(IkSolution { state: q, iterations: 0, position_error: pe, rotation_error: re });
    }
    if (target.translation - chain.base_pose.translation).norm() > chain.reach() {
        return Err(KinematicsError::Unreachable { position_error: pe, rotation_error: re });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let mut total_iters = 0;
    let mut best: Option<Attempt> = None;
    let mut start = q;
    for attempt in 0..=opts.restarts {
        if attempt > 0 {
            for (a, l) in start.angles.iter_mut().zip(chain.revolute_links()) {
                *a = rng.random_range(l.lower_limit..=l.upper_limit);
            }
        }
        let res = dls_attempt(chain, target, &start, opts);
        total_iters += res.iterations;
        if res.converged {
            return Ok(IkSolution {
                state: res.q,
                iterations: total_iters,
                position_error: res.position_error,
                rotation_error: res.rotation_error,
            });
        }
        let better = best
            .as_ref()
            .is_none_or(|b| res.position_error + res.rotation_error < b.position_error + b.rotation_error);
        if better {
            best = Some(res);
        }
    }
    let best = best.expect("at least one attempt runs");
    Err(KinematicsError::Unreachable { position_error: best.position_error, rotation_error: best.rotation_error })
}

fn error_norms(e: &Vector6<f64>) -> (f64, f64) {
    (e.fixed_rows::<3>(0).norm(), e.fixed_rows::<3>(3).norm())
}

fn dls_attempt(chain: &KinematicChain, target: &RigidTransform, start: &JointState, opts: &IkOptions) -> Attempt {
    let mut q = start.clone();
    let fk = fk_unchecked(chain, &q.angles);
    let mut err = pose_error(target, &fk.tcp);
    let (mut pe, mut re) = error_norms(&err);
    let converged = |pe: f64, re: f64| pe < opts.pos_tol && re < opts.rot_tol;
    if converged(pe, re) {
        return Attempt { q, iterations: 0, position_error: pe, rotation_error: re, converged: true };
    }

    let min_damping = (opts.damping / 8.0).max(1e-6);
    let max_damping = opts.damping.max(min_damping) * 1e3;
    let mut lambda = opts.damping.max(min_damping);
    let mut jac = jacobian_from_fk(&fk);
    let mut cost = err.norm_squared();
    let n = q.dof();
    let mut candidate = q.clone();
    let limits: Vec<(f64, f64)> = chain.revolute_links().map(|l| (l.lower_limit, l.upper_limit)).collect();
    let mut active = vec![true; n];
    let mut window_cost = cost;

    for iter in 1..=opts.max_iters {
        // Joints parked on a limit and pushed outward are frozen for this
        // step, so the remaining joints absorb the error instead of losing
        // the clamped part of the step.
        active.iter_mut().for_each(|a| *a = true);
        let mut dq = DVector::zeros(n);
        let mut factored = true;
        for _ in 0..n {
            let mut jm = jac.clone();
            for (j, a) in active.iter().enumerate() {
                if !a {
                    jm.column_mut(j).fill(0.0);
                }
            }
            let jjt: Matrix6<f64> = &jm * jm.transpose() + Matrix6::identity() * (lambda * lambda);
            let Some(ch) = jjt.cholesky() else {
                factored = false;
                break;
            };
            dq = jm.transpose() * ch.solve(&err);
            let mut changed = false;
            for j in 0..n {
                let (lo, hi) = limits[j];
                if active[j] && ((q.angles[j] <= lo && dq[j] < 0.0) || (q.angles[j] >= hi && dq[j] > 0.0)) {
                    active[j] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if factored {
            let step = dq.amax();
            if step > MAX_STEP {
                dq *= MAX_STEP / step;
            }
            for j in 0..n {
                candidate.angles[j] = q.angles[j] + dq[j];
            }
            chain.clamp(&mut candidate);
            let cand_fk = fk_unchecked(chain, &candidate.angles);
            let cand_err = pose_error(target, &cand_fk.tcp);
            let cand_cost = cand_err.norm_squared();
            if cand_cost < cost {
                std::mem::swap(&mut q, &mut candidate);
                err = cand_err;
                cost = cand_cost;
                (pe, re) = error_norms(&err);
                if converged(pe, re) {
                    return Attempt { q, iterations: iter, position_error: pe, rotation_error: re, converged: true };
                }
                jac = jacobian_from_fk(&cand_fk);
                lambda = (lambda * 0.5).max(min_damping);
            } else {
                lambda = (lambda * 4.0).min(max_damping);
            }
        } else {
            lambda = (lambda * 4.0).min(max_damping);
        }
        if iter % STALL_WINDOW == 0 {
            if cost > window_cost * STALL_RATIO {
                return Attempt { q, iterations: iter, position_error: pe, rotation_error: re, converged: false };
            }
            window_cost = cost;
        }
    }
    Attempt { q, iterations: opts.max_iters, position_error: pe, rotation_error: re, converged: false }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Two revolute z-joints, 1 m links, TCP at the end of the second link.
    pub fn planar_two_link() -> KinematicChain {
        let link = |name: &str, x: f64| Link {
            name: name.into(),
            joint_type: JointType::Revolute,
            joint_origin: RigidTransform::from_translation(x, 0.0, 0.0),
            joint_axis: Vector3::z_axis(),
            lower_limit: -3.0,
            upper_limit: 3.0,
            collision_spheres: vec![CollisionSphere { center: Vector3::new(0.5, 0.0, 0.0), radius: 0.1 }],
        };
        KinematicChain::new(
            "planar",
            vec![link("a", 0.0), link("b", 1.0)],
            RigidTransform::from_translation(1.0, 0.0, 0.0),
            RigidTransform::identity(),
            0.08,
            None,
        )
        .unwrap()
    }
}
