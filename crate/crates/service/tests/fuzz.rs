mod common;

use std::collections::HashMap;

use arbot_client::api::{SessionState, SessionView};
use axum::http::{Method, StatusCode};
use common::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const CALLS: usize = 1000;

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.random_range(0..items.len())])
    }
}

#[tokio::test]
async fn random_call_sequences_keep_sessions_consistent() {
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path());
    let app = app(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut states: HashMap<String, SessionState> = HashMap::new();
    let mut previews: Vec<(String, String, String)> = Vec::new();
    let mut counts: HashMap<u16, usize> = HashMap::new();

    for call in 0..CALLS {
        let ids: Vec<String> = states.keys().cloned().collect();
        let id = pick(&mut rng, &ids).cloned().unwrap_or_else(|| "ghost".into());
        let id = if rng.random_bool(0.05) { "ghost".to_string() } else { id };
        let point = [rng.random_range(-0.2..0.9), rng.random_range(-0.6..0.6), rng.random_range(-0.1..0.8)];
        let gripper = if rng.random_bool(0.5) { "open" } else { "closed" };
        let op = rng.random_range(0..16);
        let reply = match op {
            0 => {
                let scene = if rng.random_bool(0.9) { SCENE } else { "nowhere" };
                post(&app, "/v1/sessions", json!({"scene": scene})).await
            }
            1 => {
                let p = if rng.random_bool(0.7) { [point[0], point[1], 0.0] } else { point };
                post(&app, &format!("/v1/sessions/{id}/anchor"), json!({"point": p})).await
            }
            2 => {
                let mode = ["pointing", "gui", "kinesthetic", "telepathy"][rng.random_range(0..4)];
                post(&app, &format!("/v1/sessions/{id}/mode"), json!({"mode": mode})).await
            }
            3 | 4 | 5 => {
                post(&app, &format!("/v1/sessions/{id}/keypoints"), json!({"point": point, "gripper": gripper})).await
            }
            6 => {
                let pose = json!({"rotation": [0.0, 1.0, 0.0, 0.0], "translation": point});
                post(&app, &format!("/v1/sessions/{id}/poses"), json!({"pose": pose, "gripper": gripper})).await
            }
            7 => raw(&app, Method::POST, &format!("/v1/sessions/{id}/hand-frames"), None, String::new()).await,
            8 | 9 => match pick(&mut rng, &previews).cloned() {
                Some((sid, pid, token)) => {
                    let token = if rng.random_bool(0.2) { "forged".to_string() } else { token };
                    post(&app, &format!("/v1/sessions/{sid}/previews/{pid}/accept"), json!({"token": token})).await
                }
                None => get(&app, "/v1/health").await,
            },
            10 => match pick(&mut rng, &previews).cloned() {
                Some((sid, pid, _)) => post(&app, &format!("/v1/sessions/{sid}/previews/{pid}/discard"), json!({})).await,
                None => get(&app, "/v1/sessions").await,
            },
            11 => match pick(&mut rng, &previews).cloned() {
                Some((sid, pid, _)) => get(&app, &format!("/v1/sessions/{sid}/previews/{pid}/stream")).await,
                None => get(&app, "/v1/robot").await,
            },
            12 => post(&app, &format!("/v1/sessions/{id}/cancel"), json!({})).await,
            13 => {
                let body = json!({"language_goal": "fuzz", "export": {"peract": rng.random_bool(0.5), "imagebc": false}});
                post(&app, &format!("/v1/sessions/{id}/finalize"), body).await
            }
            14 => {
                if rng.random_bool(0.1) {
                    delete(&app, &format!("/v1/sessions/{id}")).await
                } else {
                    get(&app, &format!("/v1/sessions/{id}/geometry")).await
                }
            }
            _ => raw(&app, Method::POST, &format!("/v1/sessions/{id}/keypoints"), Some("application/json"), "{\"point\":".into()).await,
        };

        assert!(!reply.status.is_server_error(), "call {call} op {op}: {} {}", reply.status, reply.text);
        *counts.entry(reply.status.as_u16()).or_default() += 1;
        if !reply.status.is_success() {
            assert!(!reply.code().is_empty(), "call {call}: unstructured error {}", reply.text);
        } else if op == 0 {
            let v: SessionView = serde_json::from_str(&reply.text).unwrap();
            states.insert(v.id, v.state);
        } else if matches!(op, 3..=7) {
            let v = reply.json();
            previews.push((id.clone(), v["preview_id"].as_str().unwrap().into(), v["token"].as_str().unwrap().into()));
        }

        // Every session's observed state only ever moves forward by one step.
        for sid in states.keys().cloned().collect::<Vec<_>>() {
            let r = get(&app, &format!("/v1/sessions/{sid}")).await;
            if r.status == StatusCode::NOT_FOUND {
                states.remove(&sid);
                continue;
            }
            let v: SessionView = serde_json::from_str(&r.text).unwrap();
            let prev = states[&sid];
            assert!(prev.can_become(v.state), "call {call} op {op}: {prev:?} -> {:?}", v.state);
            states.insert(sid, v.state);
        }
    }
    eprintln!("status counts: {counts:?}");
    assert!(counts.get(&200).copied().unwrap_or(0) > CALLS / 10);
}
