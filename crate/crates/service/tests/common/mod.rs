#![allow(dead_code)]

use std::path::Path;

use arbot_core::archive::write_archive;
use arbot_core::synthetic::{generate, SyntheticOptions};
use arbot_core::KinematicChain;
use arbot_service::{router, AppState};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const SCENE: &str = "scene";

/// Small synthetic recording under `root/scene`.
pub fn write_scene(root: &Path) {
    let opts = SyntheticOptions { width: 160, height: 120, hold_frames: 4, move_frames: 8, ..Default::default() };
    write_archive(&root.join(SCENE), &generate(&KinematicChain::franka_style(), &opts)).unwrap();
}

pub fn app(root: &Path) -> Router {
    router(AppState::new(root, KinematicChain::franka_style()))
}

pub struct Reply {
    pub status: StatusCode,
    pub text: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }

    pub fn code(&self) -> String {
        self.json()["error"]["code"].as_str().unwrap_or_default().to_string()
    }
}

pub async fn raw(app: &Router, method: Method, uri: &str, content_type: Option<&str>, body: String) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply { status, text: String::from_utf8(bytes.to_vec()).unwrap() }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    raw(app, Method::GET, uri, None, String::new()).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    raw(app, Method::POST, uri, Some("application/json"), body.to_string()).await
}

pub async fn delete(app: &Router, uri: &str) -> Reply {
    raw(app, Method::DELETE, uri, None, String::new()).await
}

/// Creates a session on the bundled scene and anchors it at the origin.
pub async fn anchored(app: &Router) -> String {
    let r = post(app, "/v1/sessions", serde_json::json!({"scene": SCENE})).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let id = r.json()["id"].as_str().unwrap().to_string();
    let r = post(app, &format!("/v1/sessions/{id}/anchor"), serde_json::json!({"point": [0.0, 0.0, 0.0]})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    id
}
