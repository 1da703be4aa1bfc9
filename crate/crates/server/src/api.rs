//! HTTP routes.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use branch_core::dataset::from_json_str;
use branch_core::model::DisclosureId;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::jobs::{EstimateRequest, JobState, Service, SubmitError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub job_id: String,
    pub included: Vec<DisclosureId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_job_id: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn submit(service: &Service, request: EstimateRequest, parent: Option<String>) -> Response {
    match service.submit(request, parent.clone()) {
        Ok(job_id) => (
            StatusCode::ACCEPTED,
            Json(Submitted {
                job_id,
                parent_job_id: parent,
            }),
        )
            .into_response(),
        Err(e @ SubmitError::QueueFull) | Err(e @ SubmitError::Closed) => {
            error(StatusCode::SERVICE_UNAVAILABLE, e.to_string())
        }
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn post_estimate(State(service): State<Arc<Service>>, body: Bytes) -> Response {
    let text = String::from_utf8_lossy(&body);
    let request: EstimateRequest = match from_json_str(&text) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if let Err(e) = request.check() {
        return error(StatusCode::BAD_REQUEST, e);
    }
    submit(&service, request, None)
}

async fn get_job(State(service): State<Arc<Service>>, Path(id): Path<String>) -> Response {
    match service.store().get(&id) {
        Some(job) => Json(job).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown job `{id}`")),
    }
}

async fn post_whatif(State(service): State<Arc<Service>>, body: Bytes) -> Response {
    let text = String::from_utf8_lossy(&body);
    let request: WhatIfRequest = match from_json_str(&text) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(parent) = service.store().get(&request.job_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown job `{}`", request.job_id));
    };
    if parent.state != JobState::Done {
        return error(
            StatusCode::CONFLICT,
            format!("job `{}` has not finished", parent.job_id),
        );
    }
    if request.included.is_empty() {
        return error(StatusCode::BAD_REQUEST, "the included subset is empty");
    }
    let known: BTreeSet<&DisclosureId> = parent.request.disclosures.iter().map(|d| &d.id).collect();
    if let Some(bad) = request.included.iter().find(|id| !known.contains(id)) {
        return error(
            StatusCode::BAD_REQUEST,
            format!("job `{}` has no disclosure `{bad}`", parent.job_id),
        );
    }
    let keep: BTreeSet<DisclosureId> = request.included.into_iter().collect();
    submit(&service, parent.request.restricted_to(&keep), Some(parent.job_id))
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/estimate", post(post_estimate))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/whatif", post(post_whatif))
        .with_state(service)
}
