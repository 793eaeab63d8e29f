use std::path::Path;

use arbot_client::api::SceneView;
use arbot_core::archive::SessionArchive;
use arbot_core::handtrack::{smooth_track, HandTrack, LiftOptions, SmoothOptions};
use arbot_core::pipeline::{hand_track, LoadedSession, PipelineError};
use arbot_core::scene::{
    build_point_cloud_masked, detect_dominant_plane, scene_grid, CloudOptions, Plane, PlaneOptions, VoxelGrid,
    VoxelOptions,
};

/// Most points sent to viewers.
pub const SCENE_VIEW_POINTS: usize = 20_000;
pub const COLLISION_RESOLUTION: f64 = 0.02;

/// Everything derived from a scene archive once, at session creation.
#[derive(Debug)]
pub struct LoadedScene {
    pub reference: String,
    pub session: LoadedSession,
    pub plane: Option<Plane>,
    pub grid: VoxelGrid,
    pub view: SceneView,
    /// Smoothed hand track of the recording, if it has keypoints.
    pub hand: Option<HandTrack>,
}

pub fn load_scene(reference: &str, root: &Path) -> Result<LoadedScene, PipelineError> {
    let archive = SessionArchive::open(root)?;
    let session = LoadedSession::load(&archive)?;
    let frame = session
        .frames
        .first()
        .ok_or_else(|| PipelineError::InvalidOptions("archive has no frames".into()))?;
    let mask = session.masks.as_ref().and_then(|m| m.first()).map(|m| m.data.as_slice());
    let cloud = build_point_cloud_masked(frame, &CloudOptions { stride: 2 }, mask)?;
    let plane = detect_dominant_plane(
        &cloud,
        &PlaneOptions { viewpoint: Some(frame.camera_pose.translation), ..PlaneOptions::default() },
    )
    .ok();
    let grid = scene_grid(&cloud, &VoxelOptions { resolution: COLLISION_RESOLUTION, ..VoxelOptions::default() })?;

    let step = cloud.len().div_ceil(SCENE_VIEW_POINTS).max(1);
    let colors = cloud.colors.as_deref().unwrap_or(&[]);
    let view = SceneView {
        points: cloud.points.iter().step_by(step).map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        colors: colors.iter().step_by(step).copied().collect(),
        plane,
    };

    let hand = if session.keypoints.is_empty() {
        None
    } else {
        let raw = hand_track(&session.frames, &session.keypoints, &LiftOptions::default())?;
        Some(smooth_track(&raw, &SmoothOptions::default()))
    };
    Ok(LoadedScene { reference: reference.to_string(), session, plane, grid, view, hand })
}
