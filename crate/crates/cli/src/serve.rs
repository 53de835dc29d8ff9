//! `clonetts serve`: HTTP front of the listening-test service.
//!
//! Routes:
//! - `POST /sessions` `{"listener_id", "seed"?}` → session
//! - `GET /sessions/{id}/next` → current item or completion marker
//! - `POST /sessions/{id}/ratings` `{"item_id", "value", "idempotency_key"?}` → acknowledgment
//! - `GET /export?scenario=&kind=&session=` → ratings as JSON lines
//! - `GET /audio/{hash}` → WAV bytes

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clonetts_core::dataset::content_hash;
use clonetts_core::eval::{ratings_to_jsonl, RatingKind};
use clonetts_core::listen::{create_plan, parse_plan_config, ExportFilter, ListenError, ListenService, SubmittedValue};
use serde::Deserialize;

use crate::config::Settings;
use crate::{Classify, CmdResult};

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<ListenService>,
    pub assets: Arc<HashMap<String, PathBuf>>,
}

struct ApiError(ListenError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ListenError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ListenError::SessionComplete(_) | ListenError::WrongItem { .. } | ListenError::Duplicate(_) => StatusCode::CONFLICT,
            ListenError::InvalidValue(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct NewSession {
    listener_id: String,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct Submit {
    item_id: usize,
    value: SubmittedValue,
    idempotency_key: Option<String>,
}

#[derive(Deserialize)]
struct ExportQuery {
    scenario: Option<String>,
    kind: Option<RatingKind>,
    session: Option<String>,
}

/// Seed derived from the listener id when the client does not supply one.
fn listener_seed(listener: &str) -> u64 {
    let hash = content_hash(listener.as_bytes());
    u64::from_str_radix(&hash[..16], 16).expect("hex digest")
}

async fn create_session(State(s): State<AppState>, Json(req): Json<NewSession>) -> Result<impl IntoResponse, ApiError> {
    let seed = req.seed.unwrap_or_else(|| listener_seed(&req.listener_id));
    let service = s.service.clone();
    let session = tokio::task::spawn_blocking(move || service.create_session(&req.listener_id, seed))
        .await
        .expect("session task")
        .map_err(ApiError)?;
    Ok((StatusCode::CREATED, Json(session)))
}

async fn next_item(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(s.service.next_item(&id).map_err(ApiError)?))
}

async fn submit(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Json(req): Json<Submit>) -> Result<impl IntoResponse, ApiError> {
    let service = s.service.clone();
    let ack = tokio::task::spawn_blocking(move || service.submit_rating(&id, req.item_id, &req.value, req.idempotency_key.as_deref()))
        .await
        .expect("submit task")
        .map_err(ApiError)?;
    Ok(Json(ack))
}

async fn export(State(s): State<AppState>, Query(q): Query<ExportQuery>) -> impl IntoResponse {
    let filter = ExportFilter { scenario: q.scenario, kind: q.kind, session: q.session };
    ([(header::CONTENT_TYPE, "application/x-ndjson")], ratings_to_jsonl(&s.service.export(&filter)))
}

async fn audio(State(s): State<AppState>, UrlPath(hash): UrlPath<String>) -> Response {
    let Some(path) = s.assets.get(&hash) else {
        return StatusCode::NOT_FOUND.into_response();
    };
    match tokio::fs::read(path).await {
        // a file edited after plan creation no longer matches its reference
        Ok(bytes) if content_hash(&bytes) == hash => ([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response(),
        Ok(_) => (StatusCode::CONFLICT, "asset changed since plan creation").into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_item))
        .route("/sessions/{id}/ratings", post(submit))
        .route("/export", get(export))
        .route("/audio/{hash}", get(audio))
        .with_state(state)
}

pub fn build_state(settings: &Settings) -> CmdResult<AppState> {
    let plan_cfg = match &settings.listen_plan {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("plan {}", path.display())).data()?;
            parse_plan_config(&text, &settings.plan).with_context(|| path.display().to_string()).data()?
        }
        None => settings.plan.clone(),
    };
    let (plan, assets) = create_plan(&plan_cfg, &settings.listen_audio_dir).data()?;
    let service = ListenService::open(plan, &settings.listen_data_dir).data()?;
    Ok(AppState { service: Arc::new(service), assets: Arc::new(assets) })
}

pub fn cmd_serve(settings: &Settings, addr: &str) -> CmdResult {
    let state = build_state(settings)?;
    let runtime = tokio::runtime::Runtime::new().context("starting runtime").external()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}")).external()?;
        let local = listener.local_addr().context("local address").external()?;
        println!("listening on http://{local}");
        use std::io::Write;
        let _ = std::io::stdout().flush();
        axum::serve(listener, router(state)).await.context("serving").external()
    })
}
