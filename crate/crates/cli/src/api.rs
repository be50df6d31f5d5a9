//! HTTP operator API over a [`LoopHandle`].
//!
//! Bodies are JSON. Failures return `{"code", "message"}` with a
//! machine-readable code.

use std::convert::Infallible;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use gnc_core::control::Setpoint;
use gnc_core::guidance::Waypoint;
use gnc_core::runner::{Command, CommandError, TelemetryRecord};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::service::LoopHandle;

#[derive(Debug)]
pub struct ApiError(pub CommandError);

impl ApiError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError(CommandError {
            code: code.into(),
            message: message.into(),
        })
    }

    pub fn status(&self) -> StatusCode {
        match self.0.code.as_str() {
            "bad_request" => StatusCode::BAD_REQUEST,
            "not_found" | "unknown_state" => StatusCode::NOT_FOUND,
            "transition_not_allowed" => StatusCode::CONFLICT,
            "not_running" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.0)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body, reporting failures with the `bad_request` code.
fn parse<T: DeserializeOwned>(body: &str) -> Result<T, ApiError> {
    serde_json::from_str(body).map_err(|e| ApiError::new("bad_request", format!("invalid body: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PayloadRequest {
    pub enabled: bool,
}

pub fn router(handle: LoopHandle) -> Router {
    Router::new()
        .route("/status", get(status))
        .route("/track", get(track))
        .route("/mission/waypoints", get(get_waypoints).put(put_waypoints))
        .route("/fsm/transition", post(transition))
        .route("/controller/{action}", post(controller))
        .route("/teleop", post(teleop))
        .route("/payload", post(payload))
        .route("/stop", post(stop))
        .route("/config", get(config))
        .route("/telemetry", get(telemetry))
        .fallback(|| async { ApiError::new("not_found", "no such endpoint") })
        .with_state(handle)
}

async fn status(State(h): State<LoopHandle>) -> impl IntoResponse {
    Json(h.status())
}

async fn track(State(h): State<LoopHandle>) -> impl IntoResponse {
    Json(h.track())
}

async fn config(State(h): State<LoopHandle>) -> impl IntoResponse {
    Json(h.config().clone())
}

async fn get_waypoints(State(h): State<LoopHandle>) -> impl IntoResponse {
    Json(h.waypoints())
}

async fn put_waypoints(State(h): State<LoopHandle>, body: String) -> ApiResult<Vec<Waypoint>> {
    let waypoints: Vec<Waypoint> = parse(&body)?;
    h.send(Command::SetWaypoints(waypoints.clone())).await?;
    Ok(Json(waypoints))
}

async fn transition(State(h): State<LoopHandle>, body: String) -> ApiResult<serde_json::Value> {
    let req: TransitionRequest = parse(&body)?;
    h.send(Command::Transition(req.target.clone())).await?;
    Ok(Json(json!({ "state": req.target })))
}

async fn controller(State(h): State<LoopHandle>, Path(action): Path<String>) -> ApiResult<serde_json::Value> {
    let enabled = match action.as_str() {
        "enable" => true,
        "disable" => false,
        other => return Err(ApiError::new("not_found", format!("unknown controller action '{other}'"))),
    };
    h.send(Command::SetControllerEnabled(enabled)).await?;
    Ok(Json(json!({ "enabled": enabled })))
}

async fn teleop(State(h): State<LoopHandle>, body: String) -> ApiResult<Setpoint> {
    let values: Setpoint = parse(&body)?;
    h.send(Command::Teleop(values.clone())).await?;
    Ok(Json(values))
}

async fn payload(State(h): State<LoopHandle>, body: String) -> ApiResult<PayloadRequest> {
    let req: PayloadRequest = parse(&body)?;
    h.send(Command::SetPayload(req.enabled)).await?;
    Ok(Json(req))
}

async fn stop(State(h): State<LoopHandle>) -> ApiResult<serde_json::Value> {
    h.send(Command::Stop).await?;
    Ok(Json(json!({ "stopping": true })))
}

fn record_event(record: &TelemetryRecord) -> Event {
    Event::default()
        .event("record")
        .json_data(record)
        .unwrap_or_else(|e| Event::default().event("error").data(e.to_string()))
}

/// Every record in tick order. The stream ends after the final record.
async fn telemetry(State(h): State<LoopHandle>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = h.subscribe();
    let status = h.status_receiver();
    let stream = futures::stream::unfold((rx, status, false), |(mut rx, mut status, done)| async move {
        if done {
            return None;
        }
        let msg = tokio::select! {
            biased;
            msg = rx.recv() => Some(msg),
            _ = status.wait_for(|s| !s.running) => None,
        };
        let event = match msg? {
            Ok(rec) => {
                let last = rec.flags.final_record || rec.flags.fault;
                return Some((Ok(record_event(&rec)), (rx, status, last)));
            }
            Err(RecvError::Lagged(n)) => Event::default().event("lagged").data(n.to_string()),
            Err(RecvError::Closed) => return None,
        };
        Some((Ok(event), (rx, status, false)))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
