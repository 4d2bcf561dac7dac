//! HTTP front end for an interactive adaptation session.
//!
//! | route | effect |
//! |---|---|
//! | `POST /sessions` | build a session from a [`SessionConfig`], phase `ready` |
//! | `GET /sessions/{id}` | phase, cursor and stream length |
//! | `GET /sessions/{id}/next` | pre-stage on the next image, phase `awaiting_feedback` |
//! | `POST /sessions/{id}/feedback` | record the correction, run the feedback stage, phase `ready` |
//! | `GET /sessions/{id}/report` | current [`StreamReport`] |
//! | `GET /healthz` | liveness |
//!
//! Every session runs on the same [`StreamSession`] as the offline harness.

pub mod api;
pub mod client;
pub mod error;
pub mod store;

use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use hitta_core::checkpoint::Checkpoint;
use hitta_core::datagen::load_dataset;
use hitta_core::feedback_adapt::{FeedbackRecord, HeadTag};
use hitta_core::harness::{build_stream, Feedback, MethodSpec, StreamItem, StreamReport, StreamSession};
use hitta_core::mask::LabelMap;
use hitta_core::{Error, Result};
use tokio::sync::{Mutex, OwnedMutexGuard, RwLock};

pub use api::*;
pub use error::ApiError;
use store::SessionDir;

pub struct SessionEntry {
    pub session: StreamSession,
    pub config: SessionConfig,
    dir: Option<SessionDir>,
}

impl SessionEntry {
    pub fn phase(&self) -> Phase {
        if self.session.pending().is_some() {
            Phase::AwaitingFeedback
        } else if self.session.is_done() {
            Phase::Done
        } else {
            Phase::Ready
        }
    }
}

type Shared = Arc<Mutex<SessionEntry>>;

/// Shared state of the service. With a root directory, sessions are
/// persisted and reloaded by [`AppState::resume`].
#[derive(Clone)]
pub struct AppState {
    root: Option<PathBuf>,
    sessions: Arc<RwLock<HashMap<String, Shared>>>,
    counter: Arc<AtomicU64>,
}

/// Resolves the method and stream for `cfg`. Shared with the client, which
/// must see the same stream order.
pub fn session_stream(cfg: &SessionConfig) -> Result<(MethodSpec, Vec<StreamItem>)> {
    let spec = MethodSpec::resolve(cfg.method, &cfg.settings())?;
    let data = load_dataset(&cfg.dataset)?;
    let domains = if cfg.domains.is_empty() {
        data.target_domains().into_iter().map(str::to_string).collect()
    } else {
        cfg.domains.clone()
    };
    let mut items = build_stream(&data, &domains, cfg.seed, cfg.shuffle)?;
    if let Some(limit) = cfg.limit {
        items.truncate(limit);
    }
    Ok((spec, items))
}

fn build_session(cfg: &SessionConfig, dir: Option<&SessionDir>) -> Result<StreamSession> {
    let (spec, items) = session_stream(cfg)?;
    let saved = match dir {
        Some(d) => d.load_state()?,
        None => None,
    };
    match saved {
        Some(s) => {
            let (net, head) = s.checkpoint.restore()?;
            StreamSession::resume(spec, net, head, items, cfg.seed, s.report)
        }
        None => {
            let (net, _) = Checkpoint::load(&cfg.checkpoint)?.restore()?;
            StreamSession::new(spec, net, items, cfg.seed)
        }
    }
}

fn status_of(id: &str, e: &SessionEntry) -> SessionStatus {
    SessionStatus {
        id: id.to_string(),
        phase: e.phase(),
        cursor: e.session.cursor(),
        total: e.session.len(),
        method: e.config.method,
        fingerprint: e.session.report().fingerprint.clone(),
    }
}

fn metrics(session: &StreamSession) -> MetricsSnapshot {
    let r = session.report();
    MetricsSnapshot {
        completed: r.rows.len(),
        remaining: session.len() - session.cursor(),
        mean_r1: r.mean_r1,
        mean_rstar: r.mean_rstar,
    }
}

/// Checks a feedback body against the pending presentation without
/// touching the session.
fn parse_feedback(entry: &SessionEntry, req: FeedbackRequest) -> Result<Option<Feedback>> {
    let p = entry
        .session
        .pending()
        .ok_or_else(|| Error::Conflict("no sample awaiting feedback".into()))?;
    let chosen = req.chosen.unwrap_or(HeadTag::Main);
    if chosen == HeadTag::Preference && p.preference.is_none() {
        return Err(Error::Validation("this method has no preference head".into()));
    }
    let Some(rle) = req.corrected else {
        return Ok(None);
    };
    if rle.height != p.image.height || rle.width != p.image.width {
        return Err(Error::Validation(format!(
            "corrected mask is {}x{}, expected {}x{}",
            rle.height, rle.width, p.image.height, p.image.width
        )));
    }
    let corrected = rle.decode()?;
    corrected.validate()?;
    Ok(Some(Feedback { corrected, chosen }))
}

fn pending_record(entry: &SessionEntry, f: &Feedback) -> FeedbackRecord {
    let p = entry.session.pending().expect("validated");
    FeedbackRecord {
        sample_id: p.sample_id.clone(),
        initial_main: p.main.encode_rle(),
        initial_preference: p.preference.as_ref().map(LabelMap::encode_rle),
        corrected: f.corrected.encode_rle(),
        chosen: f.chosen,
        loss_trace: Vec::new(),
        duration_ms: 0.0,
        failed: false,
    }
}

fn apply_feedback(entry: &mut SessionEntry, req: FeedbackRequest) -> Result<FeedbackResponse> {
    let feedback = parse_feedback(entry, req)?;
    let index = entry.session.cursor();
    if let (Some(dir), Some(f)) = (&entry.dir, &feedback) {
        dir.write_record(index, &pending_record(entry, f), &f.corrected)?;
    }
    let corrected = feedback.as_ref().map(|f| f.corrected.clone());
    let outcome = entry.session.commit(feedback)?;
    if let Some(dir) = &entry.dir {
        if let (Some(rec), Some(mask)) = (&outcome.record, &corrected) {
            dir.write_record(index, rec, mask)?;
        }
        dir.save_state(&mut entry.session)?;
    }
    let (loss_trace, duration_ms) = outcome
        .record
        .as_ref()
        .map_or((Vec::new(), 0.0), |r| (r.loss_trace.clone(), r.duration_ms));
    Ok(FeedbackResponse {
        phase: entry.phase(),
        row: outcome.row,
        loss_trace,
        duration_ms,
        metrics: metrics(&entry.session),
    })
}

fn next_sample(entry: &mut SessionEntry) -> Result<NextResponse> {
    if entry.session.pending().is_some() {
        return Err(Error::Conflict("a sample is already awaiting feedback".into()));
    }
    if entry.session.is_done() {
        return Ok(NextResponse {
            done: true,
            phase: Phase::Done,
            sample: None,
        });
    }
    let sample = SamplePayload::from_presentation(entry.session.present()?)?;
    Ok(NextResponse {
        done: false,
        phase: entry.phase(),
        sample: Some(sample),
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

impl AppState {
    /// Sessions live in memory only.
    pub fn ephemeral() -> Self {
        Self {
            root: None,
            sessions: Arc::default(),
            counter: Arc::new(AtomicU64::new(1)),
        }
    }

    /// Loads every session found under `root` at its last committed cursor.
    pub fn resume(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut sessions = HashMap::new();
        let mut max_id = 0;
        let mut dirs: Vec<_> = fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("config.json").is_file())
            .collect();
        dirs.sort();
        for path in dirs {
            let dir = SessionDir::open(path);
            let id = dir.id();
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            let config = dir.config()?;
            let session = build_session(&config, Some(&dir))?;
            tracing::info!(session = %id, cursor = session.cursor(), "resumed session");
            let entry = SessionEntry {
                session,
                config,
                dir: Some(dir),
            };
            sessions.insert(id, Arc::new(Mutex::new(entry)));
        }
        Ok(Self {
            root: Some(root),
            sessions: Arc::new(RwLock::new(sessions)),
            counter: Arc::new(AtomicU64::new(max_id + 1)),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    async fn get(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Mutating requests never wait behind a running adaptation.
    async fn claim(&self, id: &str) -> Result<OwnedMutexGuard<SessionEntry>, ApiError> {
        self.get(id).await?.try_lock_owned().map_err(|_| ApiError::busy())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/next", get(next_handler))
        .route("/sessions/{id}/feedback", post(feedback_handler))
        .route("/sessions/{id}/report", get(report_handler))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

/// Starts the service on a loopback port in a background thread with its
/// own runtime. Returns the bound address.
pub fn spawn_background(state: AppState) -> std::io::Result<SocketAddr> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(("127.0.0.1", 0)))?;
    let addr = listener.local_addr()?;
    std::thread::spawn(move || {
        if let Err(e) = rt.block_on(async { axum::serve(listener, router(state)).await }) {
            tracing::error!(error = %e, "background server stopped");
        }
    });
    Ok(addr)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn create_session(
    State(state): State<AppState>,
    Json(config): Json<SessionConfig>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let id = format!("s{:05}", state.counter.fetch_add(1, Ordering::SeqCst));
    let root = state.root.clone();
    let cfg = config.clone();
    let id2 = id.clone();
    let entry = blocking(move || -> Result<SessionEntry> {
        let session = build_session(&cfg, None)?;
        let dir = root.map(|r| SessionDir::create(&r, &id2, &cfg)).transpose()?;
        Ok(SessionEntry {
            session,
            config: cfg,
            dir,
        })
    })
    .await?
    .map_err(ApiError::bad_request)?;
    let body = SessionCreated {
        id: id.clone(),
        cursor: entry.session.cursor(),
        total: entry.session.len(),
        phase: entry.phase(),
        config,
    };
    tracing::info!(session = %id, method = %body.config.method, total = body.total, "created session");
    state.sessions.write().await.insert(id, Arc::new(Mutex::new(entry)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn session_status(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionStatus>, ApiError> {
    let shared = state.get(&id).await?;
    let status = match shared.try_lock() {
        Ok(entry) => status_of(&id, &entry),
        Err(_) => {
            let entry = shared.lock().await;
            let mut s = status_of(&id, &entry);
            s.phase = Phase::Adapting;
            s
        }
    };
    Ok(Json(status))
}

async fn next_handler(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<NextResponse>, ApiError> {
    let mut entry = state.claim(&id).await?;
    let resp = blocking(move || next_sample(&mut entry)).await??;
    Ok(Json(resp))
}

async fn feedback_handler(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<FeedbackRequest>,
) -> Result<Json<FeedbackResponse>, ApiError> {
    let mut entry = state.claim(&id).await?;
    let resp = blocking(move || apply_feedback(&mut entry, req)).await??;
    Ok(Json(resp))
}

async fn report_handler(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StreamReport>, ApiError> {
    let shared = state.get(&id).await?;
    let entry = shared.lock().await;
    Ok(Json(entry.session.report().clone()))
}
