//! JSON over HTTP: `POST /ask`, `GET /health`, `GET /graph/stats`, `GET /codebook`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use pmtkg::graph::CooccurrenceGraph;
use pmtkg::llm::{ChatProvider, LiveProvider, ReplayProvider};
use pmtkg::survey::Codebook;
use pmtkg::{Error, Result};

use crate::{Assistant, AssistantConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ProviderMode {
    /// Keyword detection and template answers.
    #[default]
    Template,
    /// OpenAI- or Anthropic-style endpoint configured from the environment.
    Live,
    /// Recorded responses keyed by request hash.
    Replay { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub graph_path: PathBuf,
    /// Built-in codebook when absent.
    pub codebook_path: Option<PathBuf>,
    pub provider: ProviderMode,
    #[serde(flatten)]
    pub assistant: AssistantConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            graph_path: PathBuf::from("graph.json"),
            codebook_path: None,
            provider: ProviderMode::Template,
            assistant: AssistantConfig::default(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub codebook: Arc<Codebook>,
    /// `None` when the graph could not be loaded; graph endpoints answer 503.
    pub assistant: Option<Arc<Assistant>>,
    pub load_error: Option<String>,
}

impl AppState {
    pub fn ready(assistant: Assistant) -> Self {
        AppState { codebook: assistant.graph().codebook().clone(), assistant: Some(Arc::new(assistant)), load_error: None }
    }

    pub fn unavailable(codebook: Arc<Codebook>, error: String) -> Self {
        AppState { codebook, assistant: None, load_error: Some(error) }
    }
}

pub fn build_provider(mode: &ProviderMode) -> Result<Option<Arc<dyn ChatProvider>>> {
    Ok(match mode {
        ProviderMode::Template => None,
        ProviderMode::Live => Some(Arc::new(LiveProvider::from_env()?)),
        ProviderMode::Replay { dir } => Some(Arc::new(ReplayProvider::new(dir.clone()))),
    })
}

/// A missing or unreadable graph yields a state that answers 503.
pub fn load_state(config: &ServiceConfig) -> Result<AppState> {
    let cb = Arc::new(match &config.codebook_path {
        Some(p) => Codebook::from_path(p)?,
        None => Codebook::milton(),
    });
    let graph = std::fs::read_to_string(&config.graph_path)
        .map_err(Error::from)
        .and_then(|text| CooccurrenceGraph::from_json(&text, cb.clone()));
    match graph {
        Ok(g) => {
            let provider = build_provider(&config.provider)?;
            Ok(AppState::ready(Assistant::new(Arc::new(g), config.assistant.clone(), provider)?))
        }
        Err(e) => {
            let msg = format!("graph unavailable at {}: {e}", config.graph_path.display());
            log::warn!("{msg}");
            Ok(AppState::unavailable(cb, msg))
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct AskRequest {
    pub question: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

fn unavailable(state: &AppState) -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, state.load_error.clone().unwrap_or_else(|| "graph not loaded".into()))
}

async fn health(State(state): State<AppState>) -> Response {
    match &state.assistant {
        Some(a) => Json(json!({ "status": "ok", "graph_hash": a.graph_hash() })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "unavailable", "error": state.load_error })),
        )
            .into_response(),
    }
}

async fn graph_stats(State(state): State<AppState>) -> Response {
    match &state.assistant {
        Some(a) => {
            let g = a.graph();
            Json(json!({
                "graph_hash": a.graph_hash(),
                "variant": g.variant,
                "built_from_n": g.built_from_n,
                "stats": g.stats,
                "min_support": a.config().min_support,
            }))
            .into_response()
        }
        None => unavailable(&state),
    }
}

async fn codebook(State(state): State<AppState>) -> Response {
    Json(state.codebook.as_ref().clone()).into_response()
}

async fn ask(State(state): State<AppState>, body: std::result::Result<Json<AskRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if req.question.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "question is empty");
    }
    let Some(assistant) = state.assistant.clone() else {
        return unavailable(&state);
    };
    match tokio::task::spawn_blocking(move || assistant.ask(&req.question)).await {
        Ok(Ok(answer)) => Json(answer).into_response(),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods([Method::GET, Method::POST]).allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/ask", post(ask))
        .route("/health", get(health))
        .route("/graph/stats", get(graph_stats))
        .route("/codebook", get(codebook))
        .layer(cors)
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(state: AppState, bind: &str) -> Result<()> {
    let addr: SocketAddr = bind.parse().map_err(|e| Error::Config(format!("bind address `{bind}`: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
