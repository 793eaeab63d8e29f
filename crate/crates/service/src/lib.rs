//! HTTP service for interactive demonstration sessions.
//!
//! Each session has a single writer (a per-session async mutex) and a
//! published snapshot that readers use without waiting on planning.
//! Every route lives under `/v1`; errors are `{"error":{"code","message"}}`.

mod error;
mod loaded;
mod routes;
mod session;

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use arbot_client::api::SessionView;
use arbot_core::{JointState, KinematicChain};

pub use error::{ApiError, ApiJson};
pub use loaded::{load_scene, LoadedScene};
pub use routes::router;
pub use session::{Preview, SessionCore};

/// Published, read-only view of a session.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub view: SessionView,
    pub pending: Option<Arc<Preview>>,
    pub chain: Arc<KinematicChain>,
    pub q: JointState,
    pub scene: Arc<LoadedScene>,
}

pub struct SessionEntry {
    core: tokio::sync::Mutex<SessionCore>,
    snapshot: RwLock<Arc<Snapshot>>,
    cancel: Mutex<Arc<AtomicBool>>,
    planning: AtomicBool,
}

impl SessionEntry {
    fn new(core: SessionCore) -> Self {
        let snap = Self::snapshot_of(&core);
        Self {
            core: tokio::sync::Mutex::new(core),
            snapshot: RwLock::new(Arc::new(snap)),
            cancel: Mutex::new(Arc::new(AtomicBool::new(false))),
            planning: AtomicBool::new(false),
        }
    }

    fn snapshot_of(core: &SessionCore) -> Snapshot {
        Snapshot { view: core.view(), pending: core.pending.clone(), chain: core.chain.clone(), q: core.current_q(), scene: core.scene.clone() }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, core: &SessionCore) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(Self::snapshot_of(core));
    }

    /// Fresh cancel flag for a planning run.
    fn begin_plan(&self) -> Arc<AtomicBool> {
        let flag = Arc::new(AtomicBool::new(false));
        *self.cancel.lock().expect("cancel lock") = flag.clone();
        self.planning.store(true, Ordering::SeqCst);
        flag
    }

    fn end_plan(&self) {
        self.planning.store(false, Ordering::SeqCst);
    }

    /// Signals the running plan, if any.
    fn cancel(&self) -> bool {
        let running = self.planning.load(Ordering::SeqCst);
        if running {
            self.cancel.lock().expect("cancel lock").store(true, Ordering::SeqCst);
        }
        running
    }
}

struct Inner {
    data_root: PathBuf,
    chain: Arc<KinematicChain>,
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// Scene paths in requests resolve against `data_root`; finalized
    /// datasets go to `data_root/datasets/<session id>`.
    pub fn new(data_root: impl Into<PathBuf>, chain: KinematicChain) -> Self {
        Self {
            inner: Arc::new(Inner {
                data_root: data_root.into(),
                chain: Arc::new(chain),
                sessions: RwLock::new(HashMap::new()),
            }),
        }
    }

    pub fn data_root(&self) -> &std::path::Path {
        &self.inner.data_root
    }

    pub fn chain(&self) -> &Arc<KinematicChain> {
        &self.inner.chain
    }

    pub fn session(&self, id: &str) -> Option<Arc<SessionEntry>> {
        self.inner.sessions.read().expect("sessions lock").get(id).cloned()
    }

    fn insert(&self, id: String, entry: SessionEntry) {
        self.inner.sessions.write().expect("sessions lock").insert(id, Arc::new(entry));
    }

    fn remove(&self, id: &str) -> Option<Arc<SessionEntry>> {
        self.inner.sessions.write().expect("sessions lock").remove(id)
    }

    fn entries(&self) -> Vec<Arc<SessionEntry>> {
        self.inner.sessions.read().expect("sessions lock").values().cloned().collect()
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.read().expect("sessions lock").len()
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
