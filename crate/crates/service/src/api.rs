use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use classlist_core::Answer;
use serde::Deserialize;
use serde_json::json;

use crate::service::{ServiceError, TaskService};

pub type Shared = Arc<Mutex<TaskService>>;

/// Routes:
///
/// - `GET /api/tasks/next?worker=ID`: 200 with a task, 204 when idle
/// - `POST /api/tasks/{task_id}/answers`: `{"worker":..,"answers":[..]}`
/// - `GET /api/stats`, `GET /api/classes`
/// - `POST /api/rounds/advance`: start the next round when auto-advance is off
pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{task_id}/answers", post(submit))
        .route("/api/stats", get(stats))
        .route("/api/classes", get(classes))
        .route("/api/rounds/advance", post(advance))
        .with_state(service)
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::EmptyWorker => StatusCode::BAD_REQUEST,
            ServiceError::LeaseExpired { .. } => StatusCode::CONFLICT,
            ServiceError::NotYourLease { .. } => StatusCode::FORBIDDEN,
            ServiceError::WrongAnswerCount { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::UnknownTask(_) => StatusCode::NOT_FOUND,
            ServiceError::Engine(_) | ServiceError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = json!({ "error": self.code(), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

// A panic while holding the lock leaves the engine as it was before the
// request, since every mutation validates first.
fn lock(s: &Shared) -> MutexGuard<'_, TaskService> {
    s.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Deserialize)]
struct WorkerQuery {
    #[serde(default)]
    worker: String,
}

async fn next_task(State(s): State<Shared>, Query(q): Query<WorkerQuery>) -> Result<Response, ServiceError> {
    Ok(match lock(&s).next_task(&q.worker)? {
        Some(payload) => Json(payload).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct AnswerBody {
    worker: String,
    answers: Vec<Answer>,
}

async fn submit(
    State(s): State<Shared>,
    Path(task_id): Path<u64>,
    Json(body): Json<AnswerBody>,
) -> Result<Response, ServiceError> {
    let resp = lock(&s).submit(task_id, &body.worker, &body.answers)?;
    Ok(Json(resp).into_response())
}

async fn stats(State(s): State<Shared>) -> Response {
    Json(lock(&s).stats()).into_response()
}

// Same bytes as the exported classes.json.
async fn classes(State(s): State<Shared>) -> Response {
    let body = lock(&s).classes().to_json();
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn advance(State(s): State<Shared>) -> Result<Response, ServiceError> {
    Ok(Json(lock(&s).advance()?).into_response())
}
