use reqwest::Method;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::api::*;
use arbot_core::demo::InteractionMode;
use arbot_core::handtrack::GripperState;
use arbot_core::RigidTransform;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("{status} {code}: {message}")]
    Api { status: u16, code: String, message: String },
    #[error("bad response: {0}")]
    Decode(String),
}

impl ClientError {
    /// Service error code, if the service answered with one.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http: reqwest::Client::new() }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1{}", self.base, path)
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let bytes = resp.bytes().await?;
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(b) => Err(ClientError::Api { status: status.as_u16(), code: b.error.code, message: b.error.message }),
            Err(_) => Err(ClientError::Api {
                status: status.as_u16(),
                code: status.canonical_reason().unwrap_or("error").to_string(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }

    async fn send<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T, ClientError> {
        let mut req = self.http.request(method, self.url(path));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = Self::check(req.send().await?).await?;
        let bytes = resp.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.send::<(), T>(Method::GET, path, None).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        self.send(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn create_session(&self, scene: &str) -> Result<SessionView, ClientError> {
        self.post("/sessions", &CreateSessionRequest { schema_version: Some(SCHEMA_VERSION), scene: scene.into() }).await
    }

    pub async fn list_sessions(&self) -> Result<Vec<SessionView>, ClientError> {
        self.get("/sessions").await
    }

    pub async fn session(&self, id: &str) -> Result<SessionView, ClientError> {
        self.get(&format!("/sessions/{id}")).await
    }

    pub async fn delete_session(&self, id: &str) -> Result<(), ClientError> {
        let resp = self.http.delete(self.url(&format!("/sessions/{id}"))).send().await?;
        Self::check(resp).await.map(|_| ())
    }

    pub async fn anchor(&self, id: &str, point: [f64; 3], threshold: Option<f64>) -> Result<AnchorResponse, ClientError> {
        self.post(&format!("/sessions/{id}/anchor"), &AnchorRequest { schema_version: None, point, threshold }).await
    }

    pub async fn set_mode(&self, id: &str, mode: InteractionMode) -> Result<SessionView, ClientError> {
        self.post(&format!("/sessions/{id}/mode"), &ModeRequest { schema_version: None, mode }).await
    }

    pub async fn submit_keypoint(&self, id: &str, point: [f64; 3], gripper: GripperState, dwell: f64) -> Result<PreviewView, ClientError> {
        self.post(&format!("/sessions/{id}/keypoints"), &KeypointRequest { schema_version: None, point, gripper, dwell }).await
    }

    pub async fn submit_pose(&self, id: &str, pose: RigidTransform, gripper: GripperState, dwell: f64) -> Result<PreviewView, ClientError> {
        self.post(&format!("/sessions/{id}/poses"), &PoseRequest { schema_version: None, pose, gripper, dwell }).await
    }

    /// Uploads hand frames as NDJSON; an empty slice replays the scene
    /// archive's own hand track.
    pub async fn send_hand_frames(&self, id: &str, frames: &[HandFrameLine]) -> Result<PreviewView, ClientError> {
        let mut body = String::new();
        for f in frames {
            body.push_str(&serde_json::to_string(f).expect("hand frame serializes"));
            body.push('\n');
        }
        let resp = self
            .http
            .post(self.url(&format!("/sessions/{id}/hand-frames")))
            .header(reqwest::header::CONTENT_TYPE, "application/x-ndjson")
            .body(body)
            .send()
            .await?;
        let bytes = Self::check(resp).await?.bytes().await?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Reads the whole preview stream.
    pub async fn preview(&self, id: &str, preview_id: &str) -> Result<Vec<PreviewLine>, ClientError> {
        let resp = self.http.get(self.url(&format!("/sessions/{id}/previews/{preview_id}/stream"))).send().await?;
        let text = Self::check(resp).await?.text().await?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| ClientError::Decode(e.to_string())))
            .collect()
    }

    pub async fn accept(&self, id: &str, preview_id: &str, token: &str) -> Result<AcceptResponse, ClientError> {
        self.post(
            &format!("/sessions/{id}/previews/{preview_id}/accept"),
            &AcceptRequest { schema_version: None, token: token.into() },
        )
        .await
    }

    pub async fn discard(&self, id: &str, preview_id: &str) -> Result<SessionView, ClientError> {
        self.post(&format!("/sessions/{id}/previews/{preview_id}/discard"), &serde_json::json!({})).await
    }

    pub async fn cancel(&self, id: &str) -> Result<CancelResponse, ClientError> {
        self.post(&format!("/sessions/{id}/cancel"), &serde_json::json!({})).await
    }

    pub async fn finalize(&self, id: &str, language_goal: &str, export: ExportRequest) -> Result<FinalizeResponse, ClientError> {
        self.post(
            &format!("/sessions/{id}/finalize"),
            &FinalizeRequest { schema_version: None, language_goal: language_goal.into(), export },
        )
        .await
    }

    pub async fn robot(&self) -> Result<GeometryView, ClientError> {
        self.get("/robot").await
    }

    pub async fn geometry(&self, id: &str) -> Result<GeometryView, ClientError> {
        self.get(&format!("/sessions/{id}/geometry")).await
    }

    pub async fn scene(&self, id: &str) -> Result<SceneView, ClientError> {
        self.get(&format!("/sessions/{id}/scene")).await
    }
}

