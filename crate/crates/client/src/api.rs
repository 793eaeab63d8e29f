//! Request and response bodies of the session service (schema version 1).
//! Request bodies reject unknown fields; `schema_version` is optional and,
//! when present, must equal [`SCHEMA_VERSION`].

use arbot_core::demo::{InteractionMode, KeyPoint};
use arbot_core::export::DatasetManifest;
use arbot_core::handtrack::GripperState;
use arbot_core::scene::Plane;
use arbot_core::RigidTransform;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    SceneLoaded,
    Anchored,
    Collecting,
    Finalized,
}

impl SessionState {
    /// Whether `self -> next` is a legal transition (staying put included).
    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Created, Created | SceneLoaded)
                | (SceneLoaded, SceneLoaded | Anchored)
                | (Anchored, Anchored | Collecting)
                | (Collecting, Collecting | Finalized)
                | (Finalized, Finalized)
        )
    }
}

fn open() -> GripperState {
    GripperState::Open
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    /// Archive directory, absolute or relative to the data root.
    pub scene: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub point: [f64; 3],
    /// Largest accepted distance from the support plane, meters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub mode: InteractionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    /// World-frame TCP position; orientation defaults to top-down.
    pub point: [f64; 3],
    #[serde(default = "open")]
    pub gripper: GripperState,
    #[serde(default)]
    pub dwell: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    /// World-frame TCP pose.
    pub pose: RigidTransform,
    #[serde(default = "open")]
    pub gripper: GripperState,
    #[serde(default)]
    pub dwell: f64,
}

/// One line of a hand-frame upload (NDJSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandFrameLine {
    /// Palm frame in world coordinates.
    pub frame: RigidTransform,
    pub aperture: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    #[serde(default = "yes")]
    pub peract: bool,
    #[serde(default)]
    pub imagebc: bool,
    #[serde(default = "one")]
    pub stride: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl Default for ExportRequest {
    fn default() -> Self {
        Self { peract: true, imagebc: false, stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalizeRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    pub language_goal: String,
    #[serde(default)]
    pub export: ExportRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub state: SessionState,
    pub mode: Option<InteractionMode>,
    pub scene: String,
    pub base_pose: Option<RigidTransform>,
    pub keypoints: usize,
    pub segments: usize,
    pub trajectory_samples: usize,
    pub pending_preview: Option<String>,
    /// SHA-256 over the committed session state.
    pub state_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResponse {
    pub base_pose: RigidTransform,
    pub session: SessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewView {
    pub preview_id: String,
    /// Pass back to accept; a token applies at most once.
    pub token: String,
    pub samples: usize,
    pub collision_count: usize,
    pub ik_failures: usize,
    pub keypoint: Option<KeyPoint>,
}

/// One line of the preview stream (NDJSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PreviewLine {
    Sample {
        index: usize,
        t: f64,
        q: Vec<f64>,
        gripper: GripperState,
        collision: bool,
        ik_failed: bool,
        tcp: RigidTransform,
    },
    End {
        preview_id: String,
        samples: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptResponse {
    /// False when the token had already been applied.
    pub applied: bool,
    pub session: SessionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CancelResponse {
    pub cancelled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeResponse {
    pub manifest_path: String,
    pub keyframes: usize,
    pub manifest: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub schema_version: u32,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereView {
    pub link: usize,
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkView {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub revolute: bool,
}

/// Arm collision model, in link frames (`/robot`) or world frame
/// (`/sessions/{id}/geometry`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryView {
    pub name: String,
    pub links: Vec<LinkView>,
    pub q: Option<Vec<f64>>,
    pub spheres: Vec<SphereView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
    pub plane: Option<Plane>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}
