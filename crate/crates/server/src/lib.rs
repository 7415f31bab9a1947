//! Review API over a [`ReviewQueue`].
//!
//! | route | |
//! |---|---|
//! | `GET /api/queue?limit=n` | next pending items, file order |
//! | `POST /api/verdict` | apply a [`VerdictRequest`] |
//! | `GET /api/stats` | queue depth and per-reviewer counts |
//! | `GET /api/item/{id}` | one item with its status and verdict |
//!
//! Verdicts go through a single writer. Each one is appended to the journal
//! and synced before the response is sent, so an acknowledged verdict
//! survives a crash.

use std::future::Future;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use recap_core::review::{
    ApiError, Failpoint, ItemView, QueuePage, ReviewError, ReviewQueue, VerdictAck, VerdictRequest,
};
use serde::Deserialize;
use tokio::net::TcpListener;

/// Environment variable that arms a crash point, for recovery tests.
pub const FAILPOINT_ENV: &str = "RECAP_FAILPOINT";
pub const DEFAULT_QUEUE_LIMIT: usize = 10;
pub const MAX_QUEUE_LIMIT: usize = 500;

#[derive(Clone)]
pub struct AppState {
    queue: Arc<Mutex<ReviewQueue>>,
    abort_on_crash: bool,
}

impl AppState {
    pub fn new(queue: ReviewQueue) -> Self {
        AppState { queue: Arc::new(Mutex::new(queue)), abort_on_crash: false }
    }

    /// Arms the failpoint named by `RECAP_FAILPOINT`, if any. The only
    /// supported value is `after_journal_append`: the process aborts right
    /// after the first verdict reaches the journal, before the index update
    /// and before any response.
    pub fn with_failpoint_from_env(self) -> Result<Self, String> {
        match std::env::var(FAILPOINT_ENV).ok().as_deref() {
            None | Some("") => Ok(self),
            Some("after_journal_append") => {
                self.queue.lock().unwrap_or_else(|e| e.into_inner()).set_failpoint(Some(Failpoint::AfterJournalAppend));
                Ok(AppState { abort_on_crash: true, ..self })
            }
            Some(other) => Err(format!("unknown {FAILPOINT_ENV} value {other:?}")),
        }
    }

    async fn with_queue<T: Send + 'static>(&self, f: impl FnOnce(&mut ReviewQueue) -> T + Send + 'static) -> T {
        let queue = self.queue.clone();
        tokio::task::spawn_blocking(move || f(&mut queue.lock().unwrap_or_else(|e| e.into_inner())))
            .await
            .expect("queue task panicked")
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/verdict", post(verdict))
        .route("/api/stats", get(stats))
        .route("/api/item/{id}", get(item))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>, item: Option<ItemView>) -> Response {
    (status, Json(ApiError { error: kind.into(), message: message.into(), item })).into_response()
}

#[derive(Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

async fn queue(State(state): State<AppState>, Query(p): Query<QueueParams>) -> Json<QueuePage> {
    let limit = p.limit.unwrap_or(DEFAULT_QUEUE_LIMIT).min(MAX_QUEUE_LIMIT);
    Json(
        state
            .with_queue(move |q| {
                let s = q.stats();
                QueuePage { items: q.next_pending(limit), pending: s.pending, total: s.total }
            })
            .await,
    )
}

async fn stats(State(state): State<AppState>) -> impl IntoResponse {
    Json(state.with_queue(|q| q.stats()).await)
}

async fn item(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let found = state
        .with_queue({
            let id = id.clone();
            move |q| q.item(&id)
        })
        .await;
    match found {
        Some(view) => Json(view).into_response(),
        None => error(StatusCode::NOT_FOUND, "not_found", format!("unknown item {id:?}"), None),
    }
}

async fn verdict(State(state): State<AppState>, body: Bytes) -> Response {
    let request: VerdictRequest = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) if e.is_syntax() || e.is_eof() => return error(StatusCode::BAD_REQUEST, "bad_request", e.to_string(), None),
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "invalid_verdict", e.to_string(), None),
    };
    let abort = state.abort_on_crash;
    let result = state
        .with_queue(move |q| {
            let id = request.item_id.clone();
            match q.apply(request) {
                Ok(entry) => Ok(VerdictAck { status: q.status(&id).expect("decided item exists"), entry, stats: q.stats() }),
                Err(ReviewError::InjectedCrash) if abort => {
                    tracing::error!("failpoint after_journal_append fired; aborting");
                    std::process::abort()
                }
                Err(e) => Err(Box::new((q.item(&id), e))),
            }
        })
        .await;
    match result {
        Ok(ack) => {
            tracing::info!(item = %ack.entry.verdict.item_id, seq = ack.entry.seq, "verdict recorded");
            Json(ack).into_response()
        }
        Err(failed) => {
            let (view, e) = *failed;
            let message = e.to_string();
            match e {
                ReviewError::UnknownItem(_) | ReviewError::AlreadyDecided(_) => {
                    error(StatusCode::CONFLICT, "conflict", message, view)
                }
                ReviewError::InvalidVerdict(_) => error(StatusCode::UNPROCESSABLE_ENTITY, "invalid_verdict", message, view),
                _ => {
                    tracing::error!("verdict failed: {message}");
                    error(StatusCode::INTERNAL_SERVER_ERROR, "internal", message, None)
                }
            }
        }
    }
}
