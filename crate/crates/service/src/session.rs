//! Session state machine. All methods are synchronous; the HTTP layer
//! serializes writers per session and runs the slow parts on the
//! blocking pool.

use std::path::Path;
use std::sync::Arc;

use arbot_client::api::{FinalizeResponse, PreviewLine, PreviewView, SessionState, SessionView};
use arbot_core::demo::{DemoSession, InteractionMode, KeyPoint, PlanOptions, Trajectory};
use arbot_core::export::{export_imagebc, export_peract, sha256_hex, write_dataset, PerActOptions};
use arbot_core::kinematics::forward_kinematics;
use arbot_core::{JointState, KinematicChain, RigidTransform};
use axum::http::StatusCode;
use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::ApiError;
use crate::loaded::LoadedScene;

pub const DEFAULT_ANCHOR_THRESHOLD: f64 = 0.05;

/// A planned but not yet accepted segment.
#[derive(Debug, Clone)]
pub struct Preview {
    pub id: String,
    pub token: String,
    pub keypoint: Option<KeyPoint>,
    pub trajectory: Trajectory,
    pub tcp: Vec<RigidTransform>,
}

impl Preview {
    pub fn new(chain: &KinematicChain, keypoint: Option<KeyPoint>, trajectory: Trajectory) -> Result<Self, ApiError> {
        let tcp = trajectory
            .samples
            .iter()
            .map(|s| forward_kinematics(chain, &s.q, false).map(|f| f.tcp))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(Self {
            id: uuid::Uuid::new_v4().simple().to_string(),
            token: uuid::Uuid::new_v4().simple().to_string(),
            keypoint,
            trajectory,
            tcp,
        })
    }

    pub fn view(&self) -> PreviewView {
        PreviewView {
            preview_id: self.id.clone(),
            token: self.token.clone(),
            samples: self.trajectory.len(),
            collision_count: self.trajectory.collision_count(),
            ik_failures: self.trajectory.samples.iter().filter(|s| s.ik_failed).count(),
            keypoint: self.keypoint.clone(),
        }
    }

    pub fn lines(&self) -> Vec<PreviewLine> {
        let mut out: Vec<PreviewLine> = self
            .trajectory
            .samples
            .iter()
            .zip(&self.tcp)
            .enumerate()
            .map(|(index, (s, tcp))| PreviewLine::Sample {
                index,
                t: s.t,
                q: s.q.angles.clone(),
                gripper: s.gripper,
                collision: s.collision,
                ik_failed: s.ik_failed,
                tcp: *tcp,
            })
            .collect();
        out.push(PreviewLine::End { preview_id: self.id.clone(), samples: self.trajectory.len() });
        out
    }
}

#[derive(Debug, Clone)]
pub struct SessionCore {
    pub id: String,
    pub state: SessionState,
    pub mode: Option<InteractionMode>,
    pub scene: Arc<LoadedScene>,
    /// Arm description at the origin; `chain` carries the anchored base.
    pub base_chain: Arc<KinematicChain>,
    pub chain: Arc<KinematicChain>,
    pub base_pose: Option<RigidTransform>,
    pub demo: Option<DemoSession>,
    pub pending: Option<Arc<Preview>>,
    pub applied_tokens: Vec<String>,
    pub finalized: Option<FinalizeResponse>,
    pub plan: PlanOptions,
}

#[derive(Serialize)]
struct Committed<'a> {
    state: SessionState,
    mode: Option<InteractionMode>,
    scene: &'a str,
    base_pose: Option<RigidTransform>,
    demo: Option<&'a DemoSession>,
    applied_tokens: &'a [String],
    manifest: Option<&'a str>,
}

impl SessionCore {
    pub fn new(id: String, scene: Arc<LoadedScene>, chain: Arc<KinematicChain>) -> Self {
        Self {
            id,
            state: SessionState::SceneLoaded,
            mode: None,
            scene,
            base_chain: chain.clone(),
            chain,
            base_pose: None,
            demo: None,
            pending: None,
            applied_tokens: Vec::new(),
            finalized: None,
            plan: PlanOptions::default(),
        }
    }

    /// Hash of the committed state. The pending preview is excluded, so
    /// planning and discarding leave it unchanged.
    pub fn state_hash(&self) -> String {
        let c = Committed {
            state: self.state,
            mode: self.mode,
            scene: &self.scene.reference,
            base_pose: self.base_pose,
            demo: self.demo.as_ref(),
            applied_tokens: &self.applied_tokens,
            manifest: self.finalized.as_ref().map(|f| f.manifest_path.as_str()),
        };
        sha256_hex(&serde_json::to_vec(&c).expect("session state serializes"))
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            state: self.state,
            mode: self.mode,
            scene: self.scene.reference.clone(),
            base_pose: self.base_pose,
            keypoints: self.demo.as_ref().map_or(0, |d| d.keypoints.len()),
            segments: self.demo.as_ref().map_or(0, |d| d.segments),
            trajectory_samples: self.demo.as_ref().map_or(0, |d| d.trajectory.len()),
            pending_preview: self.pending.as_ref().map(|p| p.id.clone()),
            state_hash: self.state_hash(),
        }
    }

    pub fn current_q(&self) -> JointState {
        self.demo.as_ref().map(|d| d.current_q.clone()).unwrap_or_else(|| self.chain.home_state())
    }

    fn require(&self, allowed: &[SessionState], action: &str) -> Result<(), ApiError> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(ApiError::invalid_state(format!("cannot {action} in state {:?}", self.state)))
        }
    }

    /// Places the robot base on the support plane at the projection of
    /// `point`: z along the plane normal, x along world x projected onto
    /// the plane.
    pub fn anchor(&mut self, point: [f64; 3], threshold: Option<f64>) -> Result<RigidTransform, ApiError> {
        self.require(&[SessionState::SceneLoaded, SessionState::Anchored], "anchor")?;
        let threshold = threshold.unwrap_or(DEFAULT_ANCHOR_THRESHOLD);
        if !(threshold.is_finite() && threshold >= 0.0) || point.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::bad_request("point and threshold must be finite"));
        }
        let plane = self
            .scene
            .plane
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no_plane", "scene has no support plane"))?;
        let p = Vector3::from(point);
        let d = plane.signed_distance(&p);
        if d.abs() > threshold {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "point_off_plane",
                format!("point is {:.4} m from the support plane (threshold {threshold})", d.abs()),
            ));
        }
        let z = plane.normal.normalize();
        let mut x = Vector3::x() - z * z.x;
        if x.norm() < 1e-6 {
            x = Vector3::y() - z * z.y;
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let pose = RigidTransform::from_matrix_parts(&Matrix3::from_columns(&[x, y, z]), plane.project(&p));
        self.base_pose = Some(pose);
        self.chain = Arc::new(self.base_chain.with_base_pose(pose));
        self.state = SessionState::Anchored;
        Ok(pose)
    }

    pub fn set_mode(&mut self, mode: InteractionMode) -> Result<(), ApiError> {
        self.require(&[SessionState::Anchored, SessionState::Collecting], "set mode")?;
        if self.demo.is_none() {
            let normal = self.scene.plane.map(|p| p.normal).unwrap_or_else(Vector3::z);
            self.demo = Some(DemoSession::new(&self.chain, self.scene.reference.clone(), normal, mode));
        }
        if let Some(d) = self.demo.as_mut() {
            d.mode = mode;
        }
        self.mode = Some(mode);
        self.pending = None;
        self.state = SessionState::Collecting;
        Ok(())
    }

    /// Checks that inputs of `mode` are accepted now.
    pub fn require_input(&self, mode: InteractionMode) -> Result<&DemoSession, ApiError> {
        self.require(&[SessionState::Collecting], "submit input")?;
        if self.mode != Some(mode) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "wrong_mode",
                format!("session is in {:?} mode", self.mode.unwrap_or(mode)),
            ));
        }
        self.demo.as_ref().ok_or_else(|| ApiError::internal("collecting session without demonstration"))
    }

    pub fn set_pending(&mut self, preview: Preview) -> Arc<Preview> {
        let p = Arc::new(preview);
        self.pending = Some(p.clone());
        p
    }

    fn pending_for(&self, preview_id: &str) -> Result<&Arc<Preview>, ApiError> {
        self.pending
            .as_ref()
            .filter(|p| p.id == preview_id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "preview_not_found", format!("no pending preview {preview_id}")))
    }

    /// Applies the pending preview. Repeating an applied token is a no-op
    /// that returns false.
    pub fn accept(&mut self, preview_id: &str, token: &str) -> Result<bool, ApiError> {
        if self.applied_tokens.iter().any(|t| t == token) {
            return Ok(false);
        }
        self.require(&[SessionState::Collecting], "accept")?;
        let preview = self.pending_for(preview_id)?.clone();
        if preview.token != token {
            return Err(ApiError::new(StatusCode::CONFLICT, "invalid_token", "token does not match the preview"));
        }
        let dt = self.plan.sample_dt;
        let demo = self.demo.as_mut().ok_or_else(|| ApiError::internal("collecting session without demonstration"))?;
        demo.accept_segment(preview.keypoint.clone(), preview.trajectory.clone(), dt)?;
        self.applied_tokens.push(token.to_string());
        self.pending = None;
        Ok(true)
    }

    pub fn discard(&mut self, preview_id: &str) -> Result<(), ApiError> {
        self.pending_for(preview_id)?;
        self.pending = None;
        Ok(())
    }
}

/// Export parameters of a finalize call.
#[derive(Debug, Clone)]
pub struct FinalizeJob {
    pub language_goal: String,
    pub peract: bool,
    pub imagebc: bool,
    pub stride: usize,
}

/// Finalizes a copy of `core` and writes its dataset under `out_dir`.
/// The caller commits the returned core only on success.
pub fn run_finalize(mut core: SessionCore, job: &FinalizeJob, out_dir: &Path) -> Result<SessionCore, ApiError> {
    if core.finalized.is_some() {
        return Ok(core);
    }
    core.require(&[SessionState::Collecting], "finalize")?;
    if job.language_goal.trim().is_empty() {
        return Err(ApiError::bad_request("language_goal must not be empty"));
    }
    if job.stride == 0 {
        return Err(ApiError::bad_request("stride must be at least 1"));
    }
    let chain = core.chain.clone();
    let scene = core.scene.clone();
    let demo_session = core.demo.as_mut().ok_or_else(|| ApiError::internal("collecting session without demonstration"))?;
    let demo = demo_session.finalize(&chain, Some(&job.language_goal))?;
    let s = &scene.session;
    let masks = s.masks.as_deref();
    let peract_opts = PerActOptions::default();
    let peract = if job.peract {
        Some(export_peract(&demo, &s.frames, masks, &peract_opts)?)
    } else {
        None
    };
    let imagebc = if job.imagebc {
        Some(export_imagebc(&chain, &demo, &s.frames, masks, &s.hand_present, s.plate.as_deref(), job.stride)?)
    } else {
        None
    };
    let manifest = write_dataset(
        out_dir,
        &demo,
        peract.as_deref().map(|p| (&peract_opts, p)),
        imagebc.as_deref().map(|i| (job.stride, i)),
    )?;
    core.finalized = Some(FinalizeResponse {
        manifest_path: out_dir.join("manifest.json").display().to_string(),
        keyframes: demo.keyframes.len(),
        manifest,
    });
    core.pending = None;
    core.state = SessionState::Finalized;
    Ok(core)
}
