//! Annotation HTTP API over a workspace.
//!
//! Feedback writes go through the workspace's single writer, so concurrent
//! annotators are serialized server-side.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use induct_core::workspace::Workspace;
use induct_core::{Error, Split};

use crate::config::ServerConfig;

/// Instructions shown beside the feedback box.
pub const GUIDANCE: &str = "Step through the agent's observations and actions. Then describe, in your own words, \
the specific behaviors you consider good or bad, and say where in the trajectory they happen. \
Avoid general comments such as \"The agent is good at solving the task\": they cannot be tied to a \
behavior and give the induction nothing to work with.";

/// Comments rejected in strict mode, compared after normalization.
pub const GENERIC_FEEDBACK: &[&str] = &[
    "the agent is good at solving the task",
    "the agent is bad at solving the task",
    "the agent is good",
    "the agent is bad",
    "the agent did well",
    "the agent did badly",
    "the agent did a good job",
    "the agent did a bad job",
    "the agent performed well",
    "the agent performed poorly",
    "good job",
    "bad job",
    "good",
    "bad",
];

fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    let words = match words.first() {
        Some(&"an") | Some(&"ai") if words.get(1) == Some(&"agent") => {
            let mut w = vec!["the"];
            w.extend(&words[1..]);
            w
        }
        Some(&"agent") => {
            let mut w = vec!["the"];
            w.extend(&words);
            w
        }
        _ => words,
    };
    words.join(" ")
}

/// True for near-exact matches of a denylisted generic comment.
pub fn is_generic(text: &str) -> bool {
    let n = normalize(text);
    GENERIC_FEEDBACK.contains(&n.as_str())
}

#[derive(Clone)]
struct AppState {
    workspace: Arc<Workspace>,
    strict_guidance: bool,
}

#[derive(Debug, Serialize)]
struct ApiError {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    guidance: Option<&'static str>,
}

fn reply(status: StatusCode, error: impl Into<String>, guidance: bool) -> Response {
    let body = ApiError {
        error: error.into(),
        guidance: guidance.then_some(GUIDANCE),
    };
    (status, Json(body)).into_response()
}

fn domain_error(e: Error) -> Response {
    match e {
        Error::NotFound(m) => reply(StatusCode::NOT_FOUND, format!("not found: {m}"), false),
        Error::InvalidArgument(m) => reply(StatusCode::UNPROCESSABLE_ENTITY, m, true),
        other => reply(StatusCode::INTERNAL_SERVER_ERROR, other.to_string(), false),
    }
}

async fn blocking<T, F>(f: F) -> Result<T, Response>
where
    F: FnOnce() -> induct_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| reply(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), false))?
        .map_err(domain_error)
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    split: Option<String>,
}

/// One row of the annotation queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub id: String,
    pub task: String,
    pub steps: usize,
    pub annotated: bool,
    /// `train`, `holdout`, or absent when no split is stored or the
    /// trajectory was added after splitting.
    pub split: Option<Split>,
}

async fn list_trajectories(State(s): State<AppState>, Query(q): Query<ListQuery>) -> Response {
    let split = match q.split.as_deref() {
        None | Some("") => Split::All,
        Some(v) => match Split::parse(v) {
            Some(s) => s,
            None => return reply(StatusCode::BAD_REQUEST, format!("unknown split {v:?}"), false),
        },
    };
    let ws = s.workspace.clone();
    let rows = blocking(move || {
        let annotated: std::collections::HashSet<String> =
            ws.feedback()?.into_iter().map(|f| f.trajectory_id).collect();
        let assignment = ws.load_split()?;
        Ok(ws
            .trajectories_in(split)?
            .into_iter()
            .map(|t| TrajectorySummary {
                split: assignment.as_ref().and_then(|a| a.split_of(&t.id)),
                annotated: annotated.contains(&t.id),
                steps: t.steps.len(),
                task: t.task,
                id: t.id,
            })
            .collect::<Vec<_>>())
    })
    .await;
    match rows {
        Ok(rows) => Json(rows).into_response(),
        Err(r) => r,
    }
}

async fn get_trajectory(State(s): State<AppState>, Path(id): Path<String>) -> Response {
    let ws = s.workspace.clone();
    match blocking(move || ws.trajectory(&id)).await {
        Ok(t) => Json(t).into_response(),
        Err(r) => r,
    }
}

#[derive(Debug, Deserialize)]
struct FeedbackBody {
    trajectory_id: String,
    #[serde(default)]
    annotator: String,
    text: String,
}

async fn post_feedback(State(s): State<AppState>, Json(body): Json<FeedbackBody>) -> Response {
    if body.text.trim().is_empty() {
        return reply(StatusCode::UNPROCESSABLE_ENTITY, "feedback text is empty", true);
    }
    if s.strict_guidance && is_generic(&body.text) {
        return reply(
            StatusCode::UNPROCESSABLE_ENTITY,
            "feedback is too general; point to specific good or bad behaviors",
            true,
        );
    }
    let annotator = match body.annotator.trim() {
        "" => "anonymous".to_string(),
        a => a.to_string(),
    };
    let created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let ws = s.workspace.clone();
    match blocking(move || ws.submit_feedback(&body.trajectory_id, &annotator, &body.text, &created_at)).await {
        Ok(f) => (StatusCode::CREATED, Json(f)).into_response(),
        Err(r) => r,
    }
}

async fn progress(State(s): State<AppState>) -> Response {
    let ws = s.workspace.clone();
    match blocking(move || ws.progress()).await {
        Ok(p) => Json(p).into_response(),
        Err(r) => r,
    }
}

async fn guidance(State(s): State<AppState>) -> Response {
    Json(json!({ "guidance": GUIDANCE, "strict": s.strict_guidance })).into_response()
}

const NO_UI: &str = "<!doctype html><title>annotation</title>\
<p>No annotation UI assets are configured. Build the UI and start the server with <code>--static-dir</code>.</p>";

pub fn router(workspace: Arc<Workspace>, cfg: &ServerConfig) -> Router {
    let state = AppState {
        workspace,
        strict_guidance: cfg.strict_guidance,
    };
    let api = Router::new()
        .route("/api/trajectories", get(list_trajectories))
        .route("/api/trajectories/{id}", get(get_trajectory))
        .route("/api/feedback", post(post_feedback))
        .route("/api/progress", get(progress))
        .route("/api/guidance", get(guidance))
        .with_state(state);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { Html(NO_UI) }),
    }
}

/// Serve until interrupted.
pub fn serve(workspace: Workspace, cfg: &ServerConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address: {e}")))?;
    let app = router(Arc::new(workspace), cfg);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!("annotation server listening on http://{}", listener.local_addr()?);
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
