use arbot_client::api::{ExportRequest, PreviewLine, SessionState};
use arbot_client::Client;
use arbot_core::archive::write_archive;
use arbot_core::demo::InteractionMode;
use arbot_core::handtrack::GripperState;
use arbot_core::synthetic::{generate, SyntheticOptions};
use arbot_core::KinematicChain;
use arbot_service::{serve, AppState};

#[tokio::test]
async fn client_drives_a_pointing_session() {
    let dir = tempfile::tempdir().unwrap();
    let chain = KinematicChain::franka_style();
    let opts = SyntheticOptions { width: 160, height: 120, hold_frames: 4, move_frames: 8, ..Default::default() };
    write_archive(&dir.path().join("scene"), &generate(&chain, &opts)).unwrap();

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, AppState::new(dir.path(), chain), async {
        let _ = stopped.await;
    }));

    let c = Client::new(format!("http://{addr}/"));
    assert_eq!(c.health().await.unwrap().sessions, 0);
    let err = c.create_session("absent").await.unwrap_err();
    assert_eq!(err.code(), Some("scene_not_found"));

    let s = c.create_session("scene").await.unwrap();
    assert_eq!(s.state, SessionState::SceneLoaded);
    assert_eq!(c.anchor(&s.id, [0.1, 0.0, 0.3], None).await.unwrap_err().code(), Some("point_off_plane"));
    c.anchor(&s.id, [0.0, 0.0, 0.0], None).await.unwrap();
    c.set_mode(&s.id, InteractionMode::Pointing).await.unwrap();
    assert_eq!(c.send_hand_frames(&s.id, &[]).await.unwrap_err().code(), Some("wrong_mode"));

    let p = c.submit_keypoint(&s.id, [0.5, 0.15, 0.3], GripperState::Open, 0.2).await.unwrap();
    let lines = c.preview(&s.id, &p.preview_id).await.unwrap();
    assert_eq!(lines.len(), p.samples + 1);
    assert!(matches!(lines[0], PreviewLine::Sample { index: 0, .. }));
    let hash = c.session(&s.id).await.unwrap().state_hash;
    assert_eq!(c.discard(&s.id, &p.preview_id).await.unwrap().state_hash, hash);

    for (pt, g) in [([0.55, 0.2, 0.18], GripperState::Closed), ([0.4, -0.15, 0.3], GripperState::Open)] {
        let p = c.submit_keypoint(&s.id, pt, g, 0.0).await.unwrap();
        assert!(c.accept(&s.id, &p.preview_id, &p.token).await.unwrap().applied);
        assert!(!c.accept(&s.id, &p.preview_id, &p.token).await.unwrap().applied);
    }
    assert!(!c.cancel(&s.id).await.unwrap().cancelled);
    let g = c.geometry(&s.id).await.unwrap();
    assert_eq!(g.q.unwrap().len(), 7);
    assert!(!c.robot().await.unwrap().spheres.is_empty());
    assert!(!c.scene(&s.id).await.unwrap().points.is_empty());

    let f = c.finalize(&s.id, "visit two spots", ExportRequest::default()).await.unwrap();
    assert_eq!(f.manifest.language_goal, "visit two spots");
    assert_eq!(c.list_sessions().await.unwrap()[0].state, SessionState::Finalized);
    c.delete_session(&s.id).await.unwrap();
    assert_eq!(c.session(&s.id).await.unwrap_err().code(), Some("session_not_found"));

    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}
