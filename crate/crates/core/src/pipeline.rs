//! Batch kinesthetic pipeline over a session archive:
//! lift → palm frame → smooth → mimic → keyframes → export, plus replay
//! rendering and throughput measurement.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, SessionArchive};
use crate::demo::{extract_keyframes, mimic_hand, DemoError, Demonstration, InteractionMode, KeyframeOptions, MimicOptions};
use crate::export::{
    composite_frame, export_imagebc, export_peract, nearest_frame, render_robot, sha256_hex, strided, write_dataset,
    DatasetManifest, ExportError, HandMask, ImageBcSample, PerActOptions, PerActSample,
};
use crate::geom::{RgbdFrame, RigidTransform};
use crate::handtrack::{
    estimate_hand_frame, lift_keypoints, smooth_track, HandError, HandKeypoints2D, HandPose6D, HandTrack, LiftOptions,
    SmoothOptions,
};
use crate::kinematics::{JointState, KinematicChain};
use crate::scene::{build_point_cloud_masked, scene_grid, CloudOptions, SceneError, VoxelGrid, VoxelOptions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Hand(#[from] HandError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessOptions {
    pub language_goal: String,
    /// Palm-to-TCP offset.
    pub offset: RigidTransform,
    pub lift: LiftOptions,
    pub smooth: SmoothOptions,
    pub mimic: MimicOptions,
    pub keyframes: KeyframeOptions,
    pub peract: PerActOptions,
    pub export_peract: bool,
    pub export_imagebc: bool,
    pub imagebc_stride: usize,
    /// Collision grid resolution; 0 disables collision checks.
    pub collision_resolution: f64,
}

impl Default for ProcessOptions {
    fn default() -> Self {
        Self {
            language_goal: "demonstration".into(),
            offset: RigidTransform::identity(),
            lift: LiftOptions::default(),
            smooth: SmoothOptions::default(),
            mimic: MimicOptions::default(),
            keyframes: KeyframeOptions::default(),
            peract: PerActOptions::default(),
            export_peract: true,
            export_imagebc: true,
            imagebc_stride: 1,
            collision_resolution: 0.02,
        }
    }
}

/// Per-frame hand poses: frames without keypoints, or whose lift fails,
/// become invalid samples so the track stays frame-aligned.
pub fn hand_track(
    frames: &[RgbdFrame],
    keypoints: &[(usize, HandKeypoints2D)],
    opts: &LiftOptions,
) -> Result<HandTrack, PipelineError> {
    let mut by_frame: Vec<Option<&HandKeypoints2D>> = vec![None; frames.len()];
    for (i, kp) in keypoints {
        if let Some(slot) = by_frame.get_mut(*i) {
            *slot = Some(kp);
        }
    }
    let samples = frames
        .iter()
        .zip(by_frame)
        .map(|(f, kp)| {
            kp.and_then(|kp| lift_keypoints(kp, f, opts).ok())
                .and_then(|h| estimate_hand_frame(&h).ok())
                .unwrap_or(HandPose6D { frame: RigidTransform::identity(), aperture: f64::NAN, valid: false, timestamp: f.timestamp })
        })
        .collect();
    Ok(HandTrack::new(samples, crate::handtrack::NOMINAL_RATE_HZ)?)
}

/// Collision grid from the first frame with hand pixels removed.
pub fn collision_grid(frame: &RgbdFrame, mask: Option<&HandMask>, resolution: f64) -> Result<VoxelGrid, PipelineError> {
    let cloud = build_point_cloud_masked(frame, &CloudOptions { stride: 2 }, mask.map(|m| m.data.as_slice()))?;
    Ok(scene_grid(&cloud, &VoxelOptions { resolution, ..VoxelOptions::default() })?)
}

#[derive(Debug, Clone)]
pub struct ProcessOutput {
    pub demo: Demonstration,
    pub track: HandTrack,
    pub peract: Option<Vec<PerActSample>>,
    pub imagebc: Option<Vec<ImageBcSample>>,
}

/// Loaded archive payloads.
#[derive(Debug, Clone)]
pub struct LoadedSession {
    pub name: String,
    pub frames: Vec<RgbdFrame>,
    pub keypoints: Vec<(usize, HandKeypoints2D)>,
    pub masks: Option<Vec<HandMask>>,
    pub hand_present: Vec<bool>,
    pub plate: Option<Vec<u8>>,
}

impl LoadedSession {
    pub fn load(archive: &SessionArchive) -> Result<Self, PipelineError> {
        archive.validate_payloads()?;
        Ok(Self {
            name: archive.manifest.name.clone(),
            frames: archive.load_frames()?,
            keypoints: archive.keypoints()?,
            masks: archive.load_masks()?,
            hand_present: archive.hand_present(),
            plate: archive.load_plate()?,
        })
    }
}

pub fn process(session: &LoadedSession, chain: &KinematicChain, opts: &ProcessOptions) -> Result<ProcessOutput, PipelineError> {
    if session.frames.is_empty() {
        return Err(PipelineError::InvalidOptions("archive has no frames".into()));
    }
    let raw = hand_track(&session.frames, &session.keypoints, &opts.lift)?;
    let track = smooth_track(&raw, &opts.smooth);
    let grid = if opts.collision_resolution > 0.0 {
        let mask = session.masks.as_ref().and_then(|m| m.first());
        Some(collision_grid(&session.frames[0], mask, opts.collision_resolution)?)
    } else {
        None
    };
    let traj = mimic_hand(chain, &track, &opts.offset, grid.as_ref(), &chain.home_state(), &opts.mimic)?;
    let keyframes = extract_keyframes(chain, &traj, &traj.grippers(), &[], &opts.keyframes)?;
    let demo = Demonstration {
        language_goal: opts.language_goal.clone(),
        scene_ref: session.name.clone(),
        mode: InteractionMode::Kinesthetic,
        base_pose: chain.base_pose,
        keypoints: Vec::new(),
        trajectory: traj,
        keyframes,
    };
    let masks = session.masks.as_deref();
    let peract = if opts.export_peract {
        Some(export_peract(&demo, &session.frames, masks, &opts.peract)?)
    } else {
        None
    };
    let imagebc = if opts.export_imagebc {
        Some(export_imagebc(
            chain,
            &demo,
            &session.frames,
            masks,
            &session.hand_present,
            session.plate.as_deref(),
            opts.imagebc_stride,
        )?)
    } else {
        None
    };
    Ok(ProcessOutput { demo, track, peract, imagebc })
}

pub fn write_output(dir: &Path, out: &ProcessOutput, opts: &ProcessOptions) -> Result<DatasetManifest, PipelineError> {
    Ok(write_dataset(
        dir,
        &out.demo,
        out.peract.as_deref().map(|s| (&opts.peract, s)),
        out.imagebc.as_deref().map(|s| (opts.imagebc_stride, s)),
    )?)
}

/// Renders the arm over the scene frame nearest each selected trajectory
/// sample; hand pixels are replaced by the plate when masks and plate exist.
/// Returns ceil(samples / stride) RGB frames.
pub fn replay(
    chain: &KinematicChain,
    demo: &Demonstration,
    session: &LoadedSession,
    stride: usize,
) -> Result<Vec<Vec<u8>>, PipelineError> {
    if session.frames.is_empty() {
        return Err(PipelineError::InvalidOptions("no scene frames".into()));
    }
    let times: Vec<f64> = session.frames.iter().map(|f| f.timestamp).collect();
    strided(demo.trajectory.len(), stride)
        .into_par_iter()
        .map(|si| {
            let s = &demo.trajectory.samples[si];
            let fi = nearest_frame(&times, s.t).expect("frames non-empty");
            let f = &session.frames[fi];
            let overlay = render_robot(chain, &s.q, &f.camera_pose, &f.intrinsics, &f.depth)?;
            let mask = match (&session.masks, &session.plate) {
                (Some(m), Some(_)) => m[fi].clone(),
                _ => HandMask::empty(f.width(), f.height()),
            };
            Ok(composite_frame(&f.color, f.width(), f.height(), &mask, session.plate.as_deref(), &overlay)?)
        })
        .collect()
}

pub const BENCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub schema_version: u32,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub repeats: usize,
    /// lift + palm frame + smooth + IK, one thread.
    pub frames_per_second: f64,
    /// Aggregate rate with one independent pipeline per worker thread.
    pub parallel_frames_per_second: f64,
    pub threads: usize,
    pub ik_failures: usize,
    /// SHA-256 of the joint trajectory, for determinism checks.
    pub output_sha256: String,
}

fn bench_once(session: &LoadedSession, chain: &KinematicChain, opts: &ProcessOptions) -> Result<(Vec<JointState>, usize), PipelineError> {
    let raw = hand_track(&session.frames, &session.keypoints, &opts.lift)?;
    let track = smooth_track(&raw, &opts.smooth);
    let mimic = MimicOptions { skip_collisions: true, ..opts.mimic };
    let traj = mimic_hand(chain, &track, &opts.offset, None, &chain.home_state(), &mimic)?;
    let failures = traj.samples.iter().filter(|s| s.ik_failed).count();
    Ok((traj.samples.into_iter().map(|s| s.q).collect(), failures))
}

/// Times the per-frame pipeline. Repeats until at least `min_seconds` of
/// single-thread work have been measured.
pub fn bench(
    session: &LoadedSession,
    chain: &KinematicChain,
    opts: &ProcessOptions,
    min_seconds: f64,
) -> Result<BenchReport, PipelineError> {
    let n = session.frames.len();
    if n == 0 {
        return Err(PipelineError::InvalidOptions("archive has no frames".into()));
    }
    let (qs, ik_failures) = bench_once(session, chain, opts)?;
    let start = Instant::now();
    let mut repeats = 0;
    while repeats == 0 || start.elapsed().as_secs_f64() < min_seconds {
        let (again, _) = bench_once(session, chain, opts)?;
        debug_assert_eq!(again, qs);
        repeats += 1;
    }
    let single = (n * repeats) as f64 / start.elapsed().as_secs_f64();

    let threads = rayon::current_num_threads();
    let start = Instant::now();
    (0..threads * repeats).into_par_iter().try_for_each(|_| bench_once(session, chain, opts).map(|_| ()))?;
    let parallel = (n * threads * repeats) as f64 / start.elapsed().as_secs_f64();

    let digest = sha256_hex(&serde_json::to_vec(&qs).expect("joint states serialize"));
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        frames: n,
        width: session.frames[0].width(),
        height: session.frames[0].height(),
        repeats,
        frames_per_second: single,
        parallel_frames_per_second: parallel,
        threads,
        ik_failures,
        output_sha256: digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::write_archive;
    use crate::kinematics::forward_kinematics;
    use crate::synthetic::{generate, SyntheticOptions};

    fn session(opts: &SyntheticOptions) -> (tempfile::TempDir, LoadedSession) {
        let dir = tempfile::tempdir().unwrap();
        let chain = KinematicChain::franka_style();
        write_archive(dir.path(), &generate(&chain, opts)).unwrap();
        let a = SessionArchive::open(dir.path()).unwrap();
        let s = LoadedSession::load(&a).unwrap();
        (dir, s)
    }

    fn small() -> SyntheticOptions {
        SyntheticOptions { width: 160, height: 120, hold_frames: 8, move_frames: 8, ..Default::default() }
    }

    #[test]
    fn process_small_session() {
        let (_d, s) = session(&small());
        let chain = KinematicChain::franka_style();
        let out = process(&s, &chain, &ProcessOptions::default()).unwrap();
        let kf = &out.demo.keyframes;
        assert_eq!(out.peract.as_ref().unwrap().len(), kf.len() - 1);
        assert_eq!(out.imagebc.as_ref().unwrap().len(), s.frames.len());
        assert_eq!(out.demo.trajectory.len(), s.frames.len());
        assert!(out.demo.trajectory.samples.iter().all(|x| !x.ik_failed));
        // Both gripper transitions appear as keyframes.
        let changes: Vec<_> = (1..out.demo.trajectory.len())
            .filter(|&i| out.demo.trajectory.samples[i].gripper != out.demo.trajectory.samples[i - 1].gripper)
            .collect();
        assert_eq!(changes.len(), 2);
        for c in changes {
            assert!(kf.iter().any(|k| k.index == c));
        }
        let last = out.imagebc.as_ref().unwrap().last().unwrap();
        assert_eq!(last.keyframe, kf.len() - 1);
    }

    #[test]
    fn unsmoothed_mimic_tracks_truth() {
        let (_d, s) = session(&small());
        let chain = KinematicChain::franka_style();
        let a = SessionArchive::open(_d.path()).unwrap();
        let truth = a.truth().unwrap().unwrap();
        let track = hand_track(&s.frames, &s.keypoints, &LiftOptions::default()).unwrap();
        let traj = mimic_hand(&chain, &track, &RigidTransform::identity(), None, &chain.home_state(), &MimicOptions::default()).unwrap();
        for (x, q) in traj.samples.iter().zip(&truth.joint_path) {
            let a = forward_kinematics(&chain, &x.q, false).unwrap().tcp;
            let b = forward_kinematics(&chain, q, false).unwrap().tcp;
            assert!((a.translation - b.translation).norm() < 1e-4);
            assert!(a.rotation_angle_to(&b) < 1e-3);
        }
    }

    #[test]
    fn missing_masks_with_imagebc() {
        let (_d, s) = session(&SyntheticOptions { masks: false, ..small() });
        let chain = KinematicChain::franka_style();
        let err = process(&s, &chain, &ProcessOptions::default()).unwrap_err();
        assert!(matches!(err, PipelineError::Export(ExportError::MissingMask { .. })), "{err}");
        let opts = ProcessOptions { export_imagebc: false, export_peract: false, ..Default::default() };
        assert!(process(&s, &chain, &opts).is_ok());
    }

    #[test]
    fn replay_counts_and_determinism() {
        let (_d, s) = session(&small());
        let chain = KinematicChain::franka_style();
        let out = process(&s, &chain, &ProcessOptions { export_imagebc: false, export_peract: false, ..Default::default() }).unwrap();
        let n = out.demo.trajectory.len();
        let a = replay(&chain, &out.demo, &s, 1).unwrap();
        assert_eq!(a.len(), n);
        assert_eq!(replay(&chain, &out.demo, &s, 4).unwrap().len(), n.div_ceil(4));
        assert_eq!(a, replay(&chain, &out.demo, &s, 1).unwrap());
    }

    #[test]
    fn bench_report_fields() {
        let (_d, s) = session(&small());
        let chain = KinematicChain::franka_style();
        let r = bench(&s, &chain, &ProcessOptions::default(), 0.0).unwrap();
        assert!(r.frames_per_second > 0.0);
        assert_eq!(r.frames, s.frames.len());
        let r2 = bench(&s, &chain, &ProcessOptions::default(), 0.0).unwrap();
        assert_eq!(r.output_sha256, r2.output_sha256);
        let json = serde_json::to_value(&r).unwrap();
        let keys: std::collections::BTreeSet<_> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            std::collections::BTreeSet::from([
                "schema_version",
                "frames",
                "width",
                "height",
                "repeats",
                "frames_per_second",
                "parallel_frames_per_second",
                "threads",
                "ik_failures",
                "output_sha256"
            ])
        );
    }
}
