use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use huddle_core::ids::{CohortId, ExperimentId, PublicId};
use huddle_core::model::config::{ExperimentConfig, Metadata};
use huddle_core::service::{ExperimenterAction, Outcome, ParticipantAction, ServiceError, Session};

use crate::{stream, SharedState};

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let reason = match &self.0 {
            ServiceError::Engine(e) => e.reason(),
            _ => None,
        };
        let body = json!({"error": self.0.code(), "message": self.0.to_string(), "reason": reason});
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

pub(crate) fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn experimenter(state: &SharedState, headers: &HeaderMap) -> Result<Session, ApiError> {
    let token = bearer(headers).ok_or(ServiceError::Unauthenticated)?;
    Ok(state.read(|h| h.authenticate(token))?)
}

fn outcome(status: StatusCode, o: Outcome) -> Response {
    match o {
        Outcome::Archive { bytes } => (
            status,
            [
                (header::CONTENT_TYPE, "application/zip"),
                (header::CONTENT_DISPOSITION, "attachment; filename=\"export.zip\""),
            ],
            bytes,
        )
            .into_response(),
        Outcome::Csv { bytes } => (
            status,
            [
                (header::CONTENT_TYPE, "text/csv"),
                (header::CONTENT_DISPOSITION, "attachment; filename=\"payouts.csv\""),
            ],
            bytes,
        )
            .into_response(),
        other => (status, Json(other)).into_response(),
    }
}

fn act(state: &SharedState, headers: &HeaderMap, action: ExperimenterAction, status: StatusCode) -> ApiResult {
    let session = experimenter(state, headers)?;
    let o = state.with_hub(|h| h.experimenter_action(&session, action))?;
    Ok(outcome(status, o))
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(ServiceError::BadRequest(e.to_string())))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CreateBody {
    config: ExperimentConfig,
    #[serde(default)]
    seed: Option<u64>,
}

async fn create_experiment(State(s): State<SharedState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: CreateBody = parse(&body)?;
    act(
        &s,
        &headers,
        ExperimenterAction::CreateExperiment {
            config: b.config,
            seed: b.seed,
        },
        StatusCode::CREATED,
    )
}

async fn edit_metadata(
    State(s): State<SharedState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult {
    let metadata: Metadata = parse(&body)?;
    let action = ExperimenterAction::EditMetadata {
        experiment_id: ExperimentId::from(id),
        metadata,
    };
    act(&s, &headers, action, StatusCode::OK)
}

#[derive(Deserialize)]
struct CohortBody {
    name: String,
}

async fn create_cohort(State(s): State<SharedState>, Path(id): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: CohortBody = parse(&body)?;
    let action = ExperimenterAction::CreateCohort {
        experiment_id: ExperimentId::from(id),
        name: b.name,
    };
    act(&s, &headers, action, StatusCode::CREATED)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TransferBody {
    experiment_id: ExperimentId,
    public_id: PublicId,
}

async fn create_transfer(State(s): State<SharedState>, Path(to): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: TransferBody = parse(&body)?;
    let action = ExperimenterAction::CreateTransferOffer {
        experiment_id: b.experiment_id,
        public_id: b.public_id,
        to_cohort_id: CohortId::from(to),
    };
    act(&s, &headers, action, StatusCode::CREATED)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ParticipantBody {
    experiment_id: ExperimentId,
    #[serde(default)]
    deadline_seconds: Option<u32>,
}

async fn boot(State(s): State<SharedState>, Path(pid): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: ParticipantBody = parse(&body)?;
    let action = ExperimenterAction::Boot {
        experiment_id: b.experiment_id,
        public_id: PublicId::from(pid),
    };
    act(&s, &headers, action, StatusCode::OK)
}

async fn attention(State(s): State<SharedState>, Path(pid): Path<String>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let b: ParticipantBody = parse(&body)?;
    let action = ExperimenterAction::SendAttentionCheck {
        experiment_id: b.experiment_id,
        public_id: PublicId::from(pid),
        deadline_seconds: b.deadline_seconds.unwrap_or(60),
    };
    act(&s, &headers, action, StatusCode::CREATED)
}

#[derive(Deserialize, Default)]
struct ExportQuery {
    #[serde(default)]
    kind: Option<String>,
}

async fn export(
    State(s): State<SharedState>,
    Path(id): Path<String>,
    Query(q): Query<ExportQuery>,
    headers: HeaderMap,
) -> ApiResult {
    let experiment_id = ExperimentId::from(id);
    let action = match q.kind.as_deref() {
        None | Some("archive") => ExperimenterAction::Export { experiment_id },
        Some("payouts") => ExperimenterAction::ExportPayouts { experiment_id },
        Some(other) => return Err(ServiceError::BadRequest(format!("unknown export kind '{other}'")).into()),
    };
    act(&s, &headers, action, StatusCode::OK)
}

async fn any_action(State(s): State<SharedState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let action: ExperimenterAction = parse(&body)?;
    act(&s, &headers, action, StatusCode::OK)
}

/// Holds every join-link response until the uniform delay has passed, so
/// timing does not reveal whether a private id exists.
async fn uniform<T>(s: &SharedState, started: Instant, r: T) -> T {
    tokio::time::sleep_until((started + s.join_delay).into()).await;
    r
}

async fn join(State(s): State<SharedState>, Path(private_id): Path<String>) -> ApiResult {
    let started = Instant::now();
    let r = s.with_hub(|h| h.join(&private_id));
    let r = uniform(&s, started, r).await;
    let (session, view) = r?;
    Ok(Json(json!({"session": session, "view": view})).into_response())
}

async fn join_action(State(s): State<SharedState>, Path(private_id): Path<String>, body: Bytes) -> ApiResult {
    let started = Instant::now();
    let r = match parse::<ParticipantAction>(&body) {
        Ok(action) => s
            .with_hub(|h| {
                let session = h.resolve(&private_id)?;
                h.participant_action(&session, action)
            })
            .map_err(ApiError),
        Err(e) => Err(e),
    };
    let o = uniform(&s, started, r).await?;
    Ok(outcome(StatusCode::OK, o))
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/experiments", post(create_experiment))
        .route("/experiments/{id}/metadata", patch(edit_metadata))
        .route("/experiments/{id}/cohorts", post(create_cohort))
        .route("/experiments/{id}/export", post(export))
        .route("/cohorts/{id}/transfers", post(create_transfer))
        .route("/participants/{public_id}/boot", post(boot))
        .route("/participants/{public_id}/attention", post(attention))
        .route("/actions", post(any_action))
        .route("/join/{private_id}", get(join))
        .route("/join/{private_id}/actions", post(join_action))
        .route("/stream", get(stream::handler))
        .with_state(state)
}
