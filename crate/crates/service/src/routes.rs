use std::convert::Infallible;
use std::sync::Arc;

use arbot_client::api::*;
use arbot_core::demo::{add_keypoint, mimic_hand, plan_segment, InteractionMode, KeypointInput, MimicOptions};
use arbot_core::handtrack::{smooth_track, GripperState, HandPose6D, HandTrack, SmoothOptions, NOMINAL_RATE_HZ};
use arbot_core::scene::world_spheres;
use arbot_core::RigidTransform;
use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};

use crate::error::{ApiError, ApiJson};
use crate::loaded::load_scene;
use crate::session::{run_finalize, FinalizeJob, Preview, SessionCore};
use crate::{AppState, SessionEntry};

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/robot", get(robot))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/anchor", post(anchor))
        .route("/sessions/{id}/mode", post(set_mode))
        .route("/sessions/{id}/keypoints", post(submit_keypoint))
        .route("/sessions/{id}/poses", post(submit_pose))
        .route("/sessions/{id}/hand-frames", post(submit_hand_frames))
        .route("/sessions/{id}/previews/{pid}/stream", get(stream_preview))
        .route("/sessions/{id}/previews/{pid}/accept", post(accept))
        .route("/sessions/{id}/previews/{pid}/discard", post(discard))
        .route("/sessions/{id}/cancel", post(cancel))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/geometry", get(geometry))
        .route("/sessions/{id}/scene", get(scene));
    Router::new()
        .nest("/v1", v1)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
        })
        .with_state(state)
}

fn entry(state: &AppState, id: &str) -> ApiResult<Arc<SessionEntry>> {
    state.session(id).ok_or_else(|| ApiError::session_not_found(id))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health { status: "ok".into(), schema_version: SCHEMA_VERSION, sessions: state.session_count() })
}

async fn create_session(
    State(state): State<AppState>,
    ApiJson(req): ApiJson<CreateSessionRequest>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    if req.scene.trim().is_empty() {
        return Err(ApiError::bad_request("scene must not be empty"));
    }
    let root = state.data_root().join(&req.scene);
    let reference = req.scene.clone();
    let scene = blocking(move || load_scene(&reference, &root).map_err(ApiError::from)).await?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let core = SessionCore::new(id.clone(), Arc::new(scene), state.chain().clone());
    let view = core.view();
    state.insert(id.clone(), SessionEntry::new(core));
    tracing::info!(session = %id, scene = %req.scene, "session created");
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Vec<SessionView>> {
    let mut views: Vec<SessionView> = state.entries().iter().map(|e| e.snapshot().view.clone()).collect();
    views.sort_by(|a, b| a.id.cmp(&b.id));
    Json(views)
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(entry(&state, &id)?.snapshot().view.clone()))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let e = state.remove(&id).ok_or_else(|| ApiError::session_not_found(&id))?;
    e.cancel();
    tracing::info!(session = %id, "session deleted");
    Ok(StatusCode::NO_CONTENT)
}

async fn anchor(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<AnchorRequest>,
) -> ApiResult<Json<AnchorResponse>> {
    let e = entry(&state, &id)?;
    let mut core = e.core.lock().await;
    let base_pose = core.anchor(req.point, req.threshold)?;
    e.publish(&core);
    Ok(Json(AnchorResponse { base_pose, session: core.view() }))
}

async fn set_mode(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<ModeRequest>,
) -> ApiResult<Json<SessionView>> {
    let e = entry(&state, &id)?;
    let mut core = e.core.lock().await;
    core.set_mode(req.mode)?;
    e.publish(&core);
    Ok(Json(core.view()))
}

/// Solves and plans toward a keypoint while holding the session's writer
/// lock; the plan can be interrupted through the cancel route.
async fn plan_keypoint(
    e: Arc<SessionEntry>,
    mode: InteractionMode,
    input: KeypointInput,
    gripper: GripperState,
    dwell: f64,
) -> ApiResult<Json<PreviewView>> {
    if !dwell.is_finite() || dwell < 0.0 {
        return Err(ApiError::bad_request("dwell must be a finite, non-negative number of seconds"));
    }
    let mut core = e.core.lock().await;
    let demo = core.require_input(mode)?;
    let (q, normal) = (demo.current_q.clone(), demo.plane_normal);
    let (chain, scene, opts) = (core.chain.clone(), core.scene.clone(), core.plan);
    let flag = e.begin_plan();
    let result = blocking(move || {
        let kp = add_keypoint(&chain, &q, &normal, &input, gripper, dwell, &opts.ik)?;
        let traj = plan_segment(&chain, &q, &kp, Some(&scene.grid), &opts, Some(&flag))?;
        Preview::new(&chain, Some(kp), traj)
    })
    .await;
    e.end_plan();
    let preview = core.set_pending(result?);
    e.publish(&core);
    Ok(Json(preview.view()))
}

fn finite(p: &[f64]) -> bool {
    p.iter().all(|v| v.is_finite())
}

async fn submit_keypoint(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<KeypointRequest>,
) -> ApiResult<Json<PreviewView>> {
    if !finite(&req.point) {
        return Err(ApiError::bad_request("point must be finite"));
    }
    plan_keypoint(entry(&state, &id)?, InteractionMode::Pointing, KeypointInput::Point(req.point), req.gripper, req.dwell)
        .await
}

async fn submit_pose(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<PoseRequest>,
) -> ApiResult<Json<PreviewView>> {
    if !req.pose.is_finite() {
        return Err(ApiError::bad_request("pose must be finite"));
    }
    plan_keypoint(entry(&state, &id)?, InteractionMode::Gui, KeypointInput::Pose(req.pose), req.gripper, req.dwell).await
}

fn parse_hand_frames(body: &[u8]) -> ApiResult<Vec<HandFrameLine>> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: HandFrameLine =
                serde_json::from_str(l).map_err(|err| ApiError::bad_request(format!("line {}: {err}", i + 1)))?;
            if !f.frame.is_finite() || !f.aperture.is_finite() || !f.timestamp.is_finite() {
                return Err(ApiError::bad_request(format!("line {}: values must be finite", i + 1)));
            }
            Ok(f)
        })
        .collect()
}

/// NDJSON hand frames are smoothed and mirrored onto the arm; an empty
/// body uses the scene recording's own hand track.
async fn submit_hand_frames(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<PreviewView>> {
    let lines = parse_hand_frames(&body)?;
    let e = entry(&state, &id)?;
    let mut core = e.core.lock().await;
    let seed = core.require_input(InteractionMode::Kinesthetic)?.current_q.clone();
    let track = if lines.is_empty() {
        core.scene
            .hand
            .clone()
            .ok_or_else(|| ApiError::bad_request("no hand frames uploaded and the scene has no hand track"))?
    } else {
        let samples = lines
            .iter()
            .map(|l| HandPose6D { frame: l.frame, aperture: l.aperture, valid: true, timestamp: l.timestamp })
            .collect();
        let raw = HandTrack::new(samples, NOMINAL_RATE_HZ).map_err(|err| ApiError::bad_request(err.to_string()))?;
        smooth_track(&raw, &SmoothOptions::default())
    };
    let (chain, scene) = (core.chain.clone(), core.scene.clone());
    let ik = core.plan.ik;
    e.begin_plan();
    let result = blocking(move || {
        let opts = MimicOptions { ik, ..MimicOptions::default() };
        let traj = mimic_hand(&chain, &track, &RigidTransform::identity(), Some(&scene.grid), &seed, &opts)?;
        Preview::new(&chain, None, traj)
    })
    .await;
    e.end_plan();
    let preview = core.set_pending(result?);
    e.publish(&core);
    Ok(Json(preview.view()))
}

async fn stream_preview(State(state): State<AppState>, Path((id, pid)): Path<(String, String)>) -> ApiResult<Response> {
    let snap = entry(&state, &id)?.snapshot();
    let preview = snap
        .pending
        .as_ref()
        .filter(|p| p.id == pid)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "preview_not_found", format!("no pending preview {pid}")))?;
    let chunks = preview.lines().into_iter().map(|l| {
        let mut s = serde_json::to_string(&l).expect("preview line serializes");
        s.push('\n');
        Ok::<_, Infallible>(Bytes::from(s))
    });
    let body = Body::from_stream(futures::stream::iter(chunks));
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn accept(
    State(state): State<AppState>,
    Path((id, pid)): Path<(String, String)>,
    ApiJson(req): ApiJson<AcceptRequest>,
) -> ApiResult<Json<AcceptResponse>> {
    let e = entry(&state, &id)?;
    let mut core = e.core.lock().await;
    let applied = core.accept(&pid, &req.token)?;
    e.publish(&core);
    Ok(Json(AcceptResponse { applied, session: core.view() }))
}

async fn discard(State(state): State<AppState>, Path((id, pid)): Path<(String, String)>) -> ApiResult<Json<SessionView>> {
    let e = entry(&state, &id)?;
    let mut core = e.core.lock().await;
    core.discard(&pid)?;
    e.publish(&core);
    Ok(Json(core.view()))
}

async fn cancel(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<CancelResponse>> {
    Ok(Json(CancelResponse { cancelled: entry(&state, &id)?.cancel() }))
}

async fn finalize(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<FinalizeRequest>,
) -> ApiResult<Json<FinalizeResponse>> {
    let e = entry(&state, &id)?;
    let mut core = e.core.lock().await;
    if let Some(done) = &core.finalized {
        return Ok(Json(done.clone()));
    }
    let job = FinalizeJob {
        language_goal: req.language_goal,
        peract: req.export.peract,
        imagebc: req.export.imagebc,
        stride: req.export.stride,
    };
    let out_dir = state.data_root().join("datasets").join(&id);
    let working = core.clone();
    let done = blocking(move || run_finalize(working, &job, &out_dir)).await?;
    *core = done;
    e.publish(&core);
    let response = core.finalized.clone().ok_or_else(|| ApiError::internal("finalize produced no manifest"))?;
    tracing::info!(session = %id, keyframes = response.keyframes, "session finalized");
    Ok(Json(response))
}

fn link_views(chain: &arbot_core::KinematicChain) -> Vec<LinkView> {
    chain
        .links
        .iter()
        .map(|l| LinkView {
            name: l.name.clone(),
            lower: l.lower_limit,
            upper: l.upper_limit,
            revolute: l.joint_type == arbot_core::kinematics::JointType::Revolute,
        })
        .collect()
}

async fn robot(State(state): State<AppState>) -> Json<GeometryView> {
    let chain = state.chain();
    let spheres = chain
        .links
        .iter()
        .enumerate()
        .flat_map(|(li, l)| {
            l.collision_spheres.iter().map(move |s| SphereView { link: li, center: s.center.into(), radius: s.radius })
        })
        .collect();
    Json(GeometryView { name: chain.name.clone(), links: link_views(chain), q: None, spheres })
}

async fn geometry(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<GeometryView>> {
    let snap = entry(&state, &id)?.snapshot();
    let spheres = world_spheres(&snap.chain, &snap.q)
        .map_err(|err| ApiError::internal(err.to_string()))?
        .into_iter()
        .map(|(link, _, c, radius)| SphereView { link, center: c.into(), radius })
        .collect();
    Ok(Json(GeometryView {
        name: snap.chain.name.clone(),
        links: link_views(&snap.chain),
        q: Some(snap.q.angles.clone()),
        spheres,
    }))
}

async fn scene(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SceneView>> {
    Ok(Json(entry(&state, &id)?.snapshot().scene.view.clone()))
}
