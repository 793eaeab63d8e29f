//! Analytic tabletop sessions with a scripted hand, for tests and demos.
//!
//! A static camera looks straight down at a table (z = 0) carrying one box.
//! The hand follows the TCP of a joint path that holds still at four
//! configurations and moves between them with smoothstep timing; the
//! gripper closes during the third hold and opens during the fourth.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveContents, KeypointRecord, Truth};
use crate::export::{render_spheres, HandMask};
use crate::geom::{project, CameraIntrinsics, DepthFrame, RgbdFrame, RigidTransform};
use crate::handtrack::{gripper_state, synthetic_landmarks, HysteresisBand, LANDMARK_COUNT, NOMINAL_RATE_HZ};
use crate::kinematics::{forward_kinematics, inverse_kinematics, IkOptions, JointState, KinematicChain};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOptions {
    pub width: u32,
    pub height: u32,
    /// Frames per stationary hold.
    pub hold_frames: usize,
    /// Frames per move between holds.
    pub move_frames: usize,
    /// Jitters the box position and table texture.
    pub seed: u64,
    pub masks: bool,
    pub plate: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { width: 640, height: 480, hold_frames: 8, move_frames: 16, seed: 0, masks: true, plate: true }
    }
}

pub const OPEN_APERTURE: f64 = 0.09;
pub const CLOSED_APERTURE: f64 = 0.015;
const HAND_RADIUS: f64 = 0.012;
const SKIN: [u8; 3] = [224, 172, 140];

pub fn camera_pose() -> RigidTransform {
    RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI),
        Vector3::new(0.45, 0.0, 1.2),
    )
}

pub fn intrinsics(width: u32, height: u32) -> CameraIntrinsics {
    let f = 525.0 * width as f64 / 640.0;
    CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
        .expect("valid synthetic intrinsics")
}

/// TCP targets of the four holds (top-down, base frame).
pub const WAYPOINTS: [[f64; 3]; 4] = [[0.45, 0.0, 0.40], [0.5, 0.15, 0.3], [0.55, 0.2, 0.18], [0.4, -0.15, 0.3]];

struct Scene {
    box_min: Vector3<f64>,
    box_max: Vector3<f64>,
    checker_phase: f64,
}

impl Scene {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (jx, jy) = if seed == 0 { (0.0, 0.0) } else { (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02)) };
        let c = Vector3::new(0.62 + jx, 0.22 + jy, 0.05);
        let h = Vector3::new(0.04, 0.04, 0.05);
        Self { box_min: c - h, box_max: c + h, checker_phase: if seed == 0 { 0.0 } else { rng.random_range(0.0..0.05) } }
    }

    /// Camera-z depth and color of the static scene along one pixel ray.
    fn shade(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f32, [u8; 3]) {
        let mut best = (f64::INFINITY, [0u8; 3]);
        if dir.z < -1e-9 {
            let t = -origin.z / dir.z;
            let p = origin + dir * t;
            let cell = ((p.x + self.checker_phase) / 0.05).floor() as i64 + (p.y / 0.05).floor() as i64;
            best = (t, if cell.rem_euclid(2) == 0 { [205, 190, 165] } else { [185, 170, 145] });
        }
        // Slab test.
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.box_min[a] || origin[a] > self.box_max[a] {
                    t0 = f64::INFINITY;
                }
                continue;
            }
            let (mut n, mut f) = ((self.box_min[a] - origin[a]) / dir[a], (self.box_max[a] - origin[a]) / dir[a]);
            if n > f {
                std::mem::swap(&mut n, &mut f);
            }
            if n > t0 {
                t0 = n;
                axis = a;
            }
            t1 = t1.min(f);
        }
        if t0 <= t1 && t0 > 0.0 && t0 < best.0 {
            best = (t0, if axis == 2 { [220, 60, 60] } else { [170, 35, 35] });
        }
        (if best.0.is_finite() { best.0 as f32 } else { f32::NAN }, best.1)
    }

    fn render(&self, k: &CameraIntrinsics, pose: &RigidTransform) -> (Vec<f32>, Vec<u8>) {
        let n = k.width as usize * k.height as usize;
        let mut depth = vec![f32::NAN; n];
        let mut color = vec![0u8; 3 * n];
        for y in 0..k.height {
            for x in 0..k.width {
                let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                // Camera z equals the ray parameter because d.z = 1.
                let (z, c) = self.shade(&pose.translation, &pose.apply_vector(&d));
                let i = y as usize * k.width as usize + x as usize;
                depth[i] = z;
                color[3 * i..3 * i + 3].copy_from_slice(&c);
            }
        }
        (depth, color)
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Joint configurations of the four holds, solved from home in sequence.
pub fn hold_configs(chain: &KinematicChain) -> Vec<JointState> {
    let down = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    let mut seed = chain.home_state();
    let mut out = Vec::new();
    for p in WAYPOINTS {
        let target = chain.base_pose.compose(&RigidTransform::new(down, Vector3::from(p)));
        let sol = inverse_kinematics(chain, &target, &seed, &IkOptions::default()).expect("synthetic waypoints are reachable");
        seed = sol.state.clone();
        out.push(sol.state);
    }
    out
}

/// Builds the scripted session for `chain` (base pose taken from the chain).
pub fn generate(chain: &KinematicChain, opts: &SyntheticOptions) -> ArchiveContents {
    let k = intrinsics(opts.width, opts.height);
    let cam = camera_pose();
    let scene = Scene::new(opts.seed);
    let (static_depth, static_color) = scene.render(&k, &cam);

    let holds = hold_configs(chain);
    let (h, m) = (opts.hold_frames.max(1), opts.move_frames);
    let mut path: Vec<JointState> = Vec::new();
    let mut apertures: Vec<f64> = Vec::new();
    let mut hold_centers = Vec::new();
    for (i, c) in holds.iter().enumerate() {
        let start = path.len();
        if i > 0 && i + 1 < holds.len() {
            hold_centers.push(start + h / 2);
        }
        for j in 0..h {
            // Ramp the aperture across the first half of holds 2 and 3.
            let ramp = ((j as f64 + 1.0) / (h as f64 / 2.0)).min(1.0);
            let a = match i {
                2 => OPEN_APERTURE + (CLOSED_APERTURE - OPEN_APERTURE) * ramp,
                3 => CLOSED_APERTURE + (OPEN_APERTURE - CLOSED_APERTURE) * ramp,
                _ => apertures.last().copied().unwrap_or(OPEN_APERTURE),
            };
            path.push(c.clone());
            apertures.push(a);
        }
        if let Some(next) = holds.get(i + 1) {
            for j in 1..=m {
                path.push(c.lerp(next, smoothstep(j as f64 / (m + 1) as f64)));
                apertures.push(*apertures.last().unwrap());
            }
        }
    }
    let grippers = gripper_state(&apertures, &HysteresisBand::default());
    let gripper_changes = (1..grippers.len()).filter(|&i| grippers[i] != grippers[i - 1]).collect();
    for (q, a) in path.iter_mut().zip(&apertures) {
        q.gripper_aperture = if *a < 0.5 * (OPEN_APERTURE + CLOSED_APERTURE) { 0.0 } else { chain.max_aperture };
    }

    let cam_inv = cam.inverse();
    let scene_frame = DepthFrame { width: k.width, height: k.height, depth: static_depth.clone(), timestamp: 0.0 };
    let mut frames = Vec::with_capacity(path.len());
    let mut masks = Vec::with_capacity(path.len());
    let mut keypoints = Vec::with_capacity(path.len());
    for (i, (q, a)) in path.iter().zip(&apertures).enumerate() {
        let t = i as f64 / NOMINAL_RATE_HZ;
        let palm = forward_kinematics(chain, q, false).expect("path FK").tcp;
        let landmarks = synthetic_landmarks(&palm, *a);
        let cam_pts: Vec<Vector3<f64>> = landmarks.iter().map(|p| cam_inv.apply(p)).collect();
        let spheres: Vec<_> = cam_pts.iter().map(|c| (*c, HAND_RADIUS, SKIN)).collect();
        let overlay = render_spheres(&spheres, &k, &scene_frame);
        let mut depth = static_depth.clone();
        let mut color = static_color.clone();
        let mut mask = HandMask::empty(k.width, k.height);
        for p in 0..depth.len() {
            if overlay.rgba[4 * p + 3] > 0 {
                depth[p] = overlay.depth[p];
                color[3 * p..3 * p + 3].copy_from_slice(&overlay.rgba[4 * p..4 * p + 3]);
                mask.data[p] = 1;
            }
        }
        let mut points = Vec::with_capacity(LANDMARK_COUNT);
        for c in &cam_pts {
            let (u, v) = project(c, &k).expect("hand in front of camera");
            // Exact landmark depth at the sampled pixel.
            let (px, py) = (u.round() as usize, v.round() as usize);
            if px < k.width as usize && py < k.height as usize {
                depth[py * k.width as usize + px] = c.z as f32;
                mask.data[py * k.width as usize + px] = 1;
            }
            points.push([u, v]);
        }
        keypoints.push(KeypointRecord { frame: i, timestamp: t, points, confidence: vec![0.95; LANDMARK_COUNT] });
        let d = DepthFrame::new(k.width, k.height, depth, t).expect("depth dims");
        frames.push(RgbdFrame::new(color, d, cam, k, t).expect("frame dims"));
        masks.push(mask);
    }

    let truth = Truth {
        base_pose: chain.base_pose,
        offset: RigidTransform::identity(),
        joint_path: path,
        apertures,
        gripper_changes,
        hold_centers,
    };
    ArchiveContents {
        name: format!("synthetic-{}", opts.seed),
        intrinsics: k,
        nominal_rate: NOMINAL_RATE_HZ,
        hand_present: vec![true; frames.len()],
        frames,
        masks: opts.masks.then_some(masks),
        plate: opts.plate.then_some(static_color),
        keypoints,
        truth: Some(truth),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handtrack::{estimate_hand_frame, lift_keypoints, HandKeypoints2D, LiftOptions};

    fn small() -> SyntheticOptions {
        SyntheticOptions { width: 160, height: 120, hold_frames: 4, move_frames: 4, ..Default::default() }
    }

    #[test]
    fn layout_and_truth() {
        let chain = KinematicChain::franka_style();
        let s = generate(&chain, &small());
        let n = 4 * 4 + 3 * 4;
        assert_eq!(s.frames.len(), n);
        let t = s.truth.as_ref().unwrap();
        assert_eq!(t.joint_path.len(), n);
        assert_eq!(t.gripper_changes.len(), 2);
        assert_eq!(t.hold_centers, vec![10, 18]);
        for q in &t.joint_path {
            assert!(chain.within_limits(q));
        }
        assert!(s.masks.as_ref().unwrap().iter().all(|m| m.any()));
    }

    #[test]
    fn lifted_hand_matches_tcp() {
        let chain = KinematicChain::franka_style();
        let s = generate(&chain, &SyntheticOptions { hold_frames: 2, move_frames: 3, ..Default::default() });
        let t = s.truth.as_ref().unwrap();
        for (i, f) in s.frames.iter().enumerate() {
            let r = &s.keypoints[i];
            let kp = HandKeypoints2D::new(r.points.clone(), r.confidence.clone(), r.timestamp).unwrap();
            let hand = lift_keypoints(&kp, f, &LiftOptions::default()).unwrap();
            let pose = estimate_hand_frame(&hand).unwrap();
            let tcp = forward_kinematics(&chain, &t.joint_path[i], false).unwrap().tcp;
            assert!((pose.frame.translation - tcp.translation).norm() < 1e-5);
            assert!(pose.frame.rotation_angle_to(&tcp) < 1e-4);
            assert!((pose.aperture - t.apertures[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn table_depth_is_analytic() {
        let s = generate(&KinematicChain::franka_style(), &small());
        let plate = s.plate.unwrap();
        let f = &s.frames[0];
        // Corner pixel sees the table at 1.2 m.
        assert!((f.depth.at(0, 0) - 1.2).abs() < 1e-6);
        assert_eq!(&plate[0..3], &f.color[0..3]);
    }
}
