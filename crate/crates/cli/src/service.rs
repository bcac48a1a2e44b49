//! HTTP/JSON service over one retrieval engine.
//!
//! All engine state sits behind a single mutex, so requests are serialized.
//! That trivially keeps each session's requests ordered. Engine work runs on
//! the blocking pool.

use std::collections::BTreeMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, PoisonError};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use pedsearch_core::eval::{load_manifest, EvalError};
use pedsearch_core::fcd::{StructuredDescription, TemplateGenerator};
use pedsearch_core::index::{IndexError, RetrievalEngine};
use pedsearch_core::session::{RankedEntry, RetrievalSession, SessionError, SessionReport};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: ErrorDetail<'a>,
}

#[derive(Serialize)]
struct ErrorDetail<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code,
                message: &self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<IndexError> for ApiError {
    fn from(e: IndexError) -> Self {
        let msg = e.to_string();
        match e {
            IndexError::Validation(_) => Self::new(StatusCode::BAD_REQUEST, "validation_error", msg),
            IndexError::DuplicateKey(_) => Self::new(StatusCode::CONFLICT, "duplicate_key", msg),
            IndexError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", msg),
            IndexError::Fcd(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "parse_error", msg),
            IndexError::Format(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "format_error", msg),
            IndexError::Io(_) => Self::new(StatusCode::BAD_REQUEST, "io_error", msg),
            IndexError::Encoder(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "encoder_error", msg),
            IndexError::Graph(_) | IndexError::Qhr(_) => Self::internal(msg),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let msg = e.to_string();
        match e {
            SessionError::Closed(_) => Self::new(StatusCode::CONFLICT, "session_closed", msg),
            SessionError::Parse(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "parse_error", msg),
            SessionError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "not_found", msg),
            SessionError::Index(inner) => inner.into(),
        }
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e {
            EvalError::Format { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "manifest_format", msg),
            EvalError::Validation(_) => Self::new(StatusCode::BAD_REQUEST, "validation_error", msg),
            EvalError::Io(_) => Self::new(StatusCode::BAD_REQUEST, "io_error", msg),
            EvalError::Index(inner) => inner.into(),
            EvalError::Session(inner) => inner.into(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "parse_error", e.body_text())
    }
}

struct Entry {
    session: RetrievalSession,
    touched: Instant,
}

/// Everything the handlers mutate.
pub struct ServiceState {
    engine: RetrievalEngine,
    sessions: BTreeMap<String, Entry>,
    next_id: u64,
    ttl: Duration,
    snapshot: Option<PathBuf>,
}

impl ServiceState {
    pub fn new(engine: RetrievalEngine, ttl: Duration, snapshot: Option<PathBuf>) -> Self {
        Self {
            engine,
            sessions: BTreeMap::new(),
            next_id: 1,
            ttl,
            snapshot,
        }
    }

    pub fn engine(&self) -> &RetrievalEngine {
        &self.engine
    }

    fn entry(&mut self, id: &str) -> Result<&mut Entry, ApiError> {
        let e = self
            .sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown session {id}")))?;
        e.touched = Instant::now();
        Ok(e)
    }

    /// Closes and forgets sessions idle for longer than the TTL. Returns how
    /// many were dropped.
    pub fn sweep(&mut self, now: Instant) -> usize {
        let expired: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, e)| now.saturating_duration_since(e.touched) > self.ttl)
            .map(|(k, _)| k.clone())
            .collect();
        for id in &expired {
            if let Some(mut e) = self.sessions.remove(id) {
                if !e.session.is_closed() {
                    let _ = e.session.close(&mut self.engine);
                }
                tracing::info!(session = %id, "session expired");
            }
        }
        expired.len()
    }

    /// Closes open sessions (removing their pseudo-query nodes) and writes
    /// the graph snapshot if one is configured.
    pub fn shutdown(&mut self) -> Result<(), ApiError> {
        for e in self.sessions.values_mut() {
            if !e.session.is_closed() {
                e.session.close(&mut self.engine)?;
            }
        }
        if let Some(path) = &self.snapshot {
            self.engine
                .index
                .graph()
                .save(path)
                .map_err(|err| ApiError::internal(format!("snapshot {}: {err}", path.display())))?;
            tracing::info!(path = %path.display(), "graph snapshot written");
        }
        Ok(())
    }

    pub fn open_sessions(&self) -> usize {
        self.sessions.values().filter(|e| !e.session.is_closed()).count()
    }
}

/// Cloneable handle shared by the handlers.
#[derive(Clone)]
pub struct AppState(Arc<Mutex<ServiceState>>);

impl AppState {
    pub fn new(state: ServiceState) -> Self {
        Self(Arc::new(Mutex::new(state)))
    }

    /// Runs `f` on the blocking pool with the state locked.
    pub async fn with<T, F>(&self, f: F) -> Result<T, ApiError>
    where
        T: Send + 'static,
        F: FnOnce(&mut ServiceState) -> Result<T, ApiError> + Send + 'static,
    {
        let inner = self.0.clone();
        tokio::task::spawn_blocking(move || {
            let mut guard = inner.lock().unwrap_or_else(PoisonError::into_inner);
            f(&mut guard)
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
    }
}

fn truncate(ranking: &[pedsearch_core::qhr::ScoredCandidate], top_k: Option<usize>) -> Vec<RankedEntry> {
    let n = top_k.unwrap_or(usize::MAX).min(ranking.len());
    ranking[..n].iter().map(RankedEntry::from).collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub q0: String,
    #[serde(default)]
    pub t0: Option<String>,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StartResponse {
    pub session_id: String,
    pub round: usize,
    pub ranking: Vec<RankedEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub text: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoundResponse {
    pub round: usize,
    pub ranking: Vec<RankedEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevealRequest {
    pub image_key: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RevealResponse {
    pub revealed_count: usize,
    /// False when the image had already been revealed.
    pub added: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub report: SessionReport,
    pub closed: bool,
    pub revealed: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GalleryResponse {
    pub image_key: String,
    pub identity: String,
    pub description: StructuredDescription,
    pub path: Option<String>,
    pub bbox: Option<[u32; 4]>,
    /// Base64 image bytes; absent when the file cannot be read.
    pub content_base64: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestRequest {
    pub manifest_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestResponse {
    pub indexed_count: usize,
    pub total: usize,
}

async fn start(State(app): State<AppState>, body: Result<Json<StartRequest>, JsonRejection>) -> Result<Json<StartResponse>, ApiError> {
    let Json(req) = body?;
    let out = app
        .with(move |st| {
            let id = format!("s{:06}", st.next_id);
            let session = RetrievalSession::start(&mut st.engine, &id, &req.q0, req.t0.as_deref())?;
            st.next_id += 1;
            let ranking = truncate(session.latest_ranking(), req.top_k);
            st.sessions.insert(
                id.clone(),
                Entry {
                    session,
                    touched: Instant::now(),
                },
            );
            Ok(StartResponse {
                session_id: id,
                round: 0,
                ranking,
            })
        })
        .await?;
    Ok(Json(out))
}

async fn feedback(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<RoundResponse>, ApiError> {
    let Json(req) = body?;
    let out = app
        .with(move |st| {
            let ServiceState { engine, sessions, .. } = st;
            let e = sessions
                .get_mut(&id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown session {id}")))?;
            e.touched = Instant::now();
            let ranking = truncate(e.session.submit_feedback(engine, &req.text)?, req.top_k);
            Ok(RoundResponse {
                round: e.session.round(),
                ranking,
            })
        })
        .await?;
    Ok(Json(out))
}

async fn reveal(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<RevealRequest>, JsonRejection>,
) -> Result<Json<RevealResponse>, ApiError> {
    let Json(req) = body?;
    let out = app
        .with(move |st| {
            let ServiceState { engine, sessions, .. } = st;
            let e = sessions
                .get_mut(&id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown session {id}")))?;
            e.touched = Instant::now();
            let added = e.session.reveal_answer(engine, &req.image_key)?;
            Ok(RevealResponse {
                revealed_count: e.session.revealed().len(),
                added,
            })
        })
        .await?;
    Ok(Json(out))
}

fn view(s: &RetrievalSession) -> SessionView {
    SessionView {
        report: s.report(),
        closed: s.is_closed(),
        revealed: s.revealed().iter().cloned().collect(),
    }
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let out = app.with(move |st| Ok(view(&st.entry(&id)?.session))).await?;
    Ok(Json(out))
}

async fn close_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    let out = app
        .with(move |st| {
            let ServiceState { engine, sessions, .. } = st;
            let e = sessions
                .get_mut(&id)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown session {id}")))?;
            e.touched = Instant::now();
            e.session.close(engine)?;
            Ok(view(&e.session))
        })
        .await?;
    Ok(Json(out))
}

async fn gallery(State(app): State<AppState>, UrlPath(key): UrlPath<String>) -> Result<Json<GalleryResponse>, ApiError> {
    let out = app
        .with(move |st| {
            let item = st
                .engine
                .index
                .item(&key)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown image {key}")))?;
            let content_base64 = item
                .path
                .as_ref()
                .and_then(|p| std::fs::read(p).ok())
                .map(|bytes| base64::engine::general_purpose::STANDARD.encode(bytes));
            Ok(GalleryResponse {
                image_key: item.key.clone(),
                identity: item.identity.to_string(),
                description: item.description.clone(),
                path: item.path.clone(),
                bbox: item.bbox,
                content_base64,
            })
        })
        .await?;
    Ok(Json(out))
}

async fn ingest(State(app): State<AppState>, body: Result<Json<IngestRequest>, JsonRejection>) -> Result<Json<IngestResponse>, ApiError> {
    let Json(req) = body?;
    let out = app
        .with(move |st| {
            let manifest = load_manifest(&req.manifest_path)?;
            let items = manifest.ingest_items()?;
            let engine = &mut st.engine;
            let theta = engine.params.theta;
            let provider = engine.provider.clone();
            let added = engine.index.extend(&items, provider.as_ref(), &TemplateGenerator, theta)?;
            Ok(IngestResponse {
                indexed_count: added,
                total: engine.index.len(),
            })
        })
        .await?;
    Ok(Json(out))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

/// CORS for the console; an empty list allows any origin.
pub fn cors_layer(origins: &[String]) -> anyhow::Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.is_empty() {
        return Ok(layer.allow_origin(Any));
    }
    let parsed = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|e| anyhow::anyhow!("bad CORS origin {o:?}: {e}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(parsed)))
}

pub fn router(app: AppState, cors: CorsLayer) -> Router {
    Router::new()
        .route("/sessions", post(start))
        .route("/sessions/{id}", get(get_session).delete(close_session))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/reveal", post(reveal))
        .route("/gallery/{*key}", get(gallery))
        .route("/ingest", post(ingest))
        .route("/healthz", get(healthz))
        .layer(cors)
        .with_state(app)
}

/// Serves until `shutdown` resolves, then drains in-flight requests, closes
/// open sessions and writes the snapshot. Idle sessions are swept in the
/// background.
pub async fn serve(listener: TcpListener, app: AppState, cors: CorsLayer, shutdown: impl Future<Output = ()> + Send + 'static) -> anyhow::Result<()> {
    let ttl = app.with(|st| Ok(st.ttl)).await.map_err(|e| anyhow::anyhow!(e.message))?;
    let sweeper = {
        let app = app.clone();
        let every = (ttl / 10).clamp(Duration::from_secs(1), Duration::from_secs(60));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let _ = app.with(|st| Ok(st.sweep(Instant::now()))).await;
            }
        })
    };
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let result = axum::serve(listener, router(app.clone(), cors)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    app.with(|st| st.shutdown()).await.map_err(|e| anyhow::anyhow!(e.message))?;
    Ok(result?)
}
