//! HTTP JSON API over a loaded [`Session`].
//!
//! The router answers 503 until the artifacts finish loading. Query and
//! tail-patch work runs on the blocking pool; tail-patches are additionally
//! capped by a semaphore and each uses a private copy of the model.

use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};

use trackstar::config::RunConfig;

use crate::session::{QueryError, QueryRequest, Session, TailPatchRequest};

enum Load {
    Loading,
    Ready(Arc<Session>),
    Failed(String),
}

#[derive(Clone)]
pub struct AppState {
    load: Arc<RwLock<Load>>,
    tailpatch: Arc<Semaphore>,
}

impl AppState {
    pub fn loading(max_concurrent_tailpatch: usize) -> Self {
        AppState { load: Arc::new(RwLock::new(Load::Loading)), tailpatch: Arc::new(Semaphore::new(max_concurrent_tailpatch.max(1))) }
    }

    pub fn ready(session: Session) -> Self {
        let state = AppState::loading(session.config.serve.max_concurrent_tailpatch);
        state.set_ready(session);
        state
    }

    pub fn set_ready(&self, session: Session) {
        self.set_ready_shared(Arc::new(session));
    }

    pub fn set_ready_shared(&self, session: Arc<Session>) {
        *self.load.write().expect("lock") = Load::Ready(session);
    }

    pub fn set_failed(&self, message: String) {
        *self.load.write().expect("lock") = Load::Failed(message);
    }

    fn session(&self) -> Result<Arc<Session>, ApiError> {
        match &*self.load.read().expect("lock") {
            Load::Ready(s) => Ok(s.clone()),
            Load::Loading => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "artifacts are still loading".into())),
            Load::Failed(m) => Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, format!("artifacts failed to load: {m}"))),
        }
    }
}

/// Error response body: `{"error": "..."}`.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let status = match &e {
            QueryError::BadRequest(_) => StatusCode::BAD_REQUEST,
            QueryError::NotFound(_) => StatusCode::NOT_FOUND,
            QueryError::Conflict(_) => StatusCode::CONFLICT,
            QueryError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, format!("{e:#}"))
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, QueryError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn ok<T: Serialize>(v: T) -> Response {
    Json(v).into_response()
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let session = state.session()?;
    let req: QueryRequest = parse(&body)?;
    Ok(ok(blocking(move || session.query(&req)).await?))
}

async fn tailpatch(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let session = state.session()?;
    let req: TailPatchRequest = parse(&body)?;
    let _permit = state.tailpatch.clone().acquire_owned().await.expect("semaphore never closed");
    Ok(ok(blocking(move || session.tailpatch(&req)).await?))
}

async fn example(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = state.session()?;
    let id: u64 = id.parse().map_err(|_| ApiError(StatusCode::NOT_FOUND, format!("unknown example {id}")))?;
    Ok(ok(session.example(id)?))
}

async fn stats(State(state): State<AppState>) -> Result<Response, ApiError> {
    Ok(ok(state.session()?.stats()))
}

pub fn router(state: AppState, cfg: &RunConfig) -> Router {
    let origins: Vec<HeaderValue> = cfg.serve.cors_origins.iter().filter_map(|o| o.parse().ok()).collect();
    let cors = if origins.is_empty() {
        CorsLayer::new().allow_origin(Any)
    } else {
        CorsLayer::new().allow_origin(origins)
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/api/query", post(query))
        .route("/api/tailpatch", post(tailpatch))
        .route("/api/examples/{id}", get(example))
        .route("/api/stats", get(stats))
        .layer(cors)
        .with_state(state)
}

/// Binds, starts loading in the background and serves until shutdown.
pub async fn serve(store: crate::artifacts::Store, cfg: RunConfig) -> anyhow::Result<()> {
    let state = AppState::loading(cfg.serve.max_concurrent_tailpatch);
    let addr = format!("{}:{}", cfg.serve.host, cfg.serve.port);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    let loader = state.clone();
    let load_cfg = cfg.clone();
    tokio::task::spawn_blocking(move || match Session::load(&store, &load_cfg, &load_cfg.serve.presets) {
        Ok(s) => {
            tracing::info!("artifacts loaded");
            loader.set_ready(s);
        }
        Err(e) => {
            tracing::error!("loading artifacts failed: {e:#}");
            loader.set_failed(format!("{e:#}"));
        }
    });
    axum::serve(listener, router(state, &cfg)).await?;
    Ok(())
}
