//! JSON-over-HTTP routes.

use std::sync::Arc;

use arc_swap::ArcSwapOption;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use itemforge_core::evaluator::EvalError;
use itemforge_core::sampler::{render_template, GenerationParams, PromptTemplate, SamplerError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use crate::model::LoadedModel;
use crate::store::{Action, DraftParams, DraftStore, ItemDraft, SampleStatus, StoreError, TemplateKind};

pub const MAX_SAMPLES: usize = 16;
pub const MAX_TOKENS: usize = 1024;

/// Shared state: an optional model snapshot and the draft store.
pub struct AppState {
    model: ArcSwapOption<LoadedModel>,
    pub store: DraftStore,
}

impl AppState {
    pub fn new(store: DraftStore) -> Self {
        Self {
            model: ArcSwapOption::empty(),
            store,
        }
    }

    pub fn set_model(&self, model: LoadedModel) {
        self.model.store(Some(Arc::new(model)));
    }

    pub fn model(&self) -> Option<Arc<LoadedModel>> {
        self.model.load_full()
    }

    fn require_model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "ModelNotLoaded", "model is still loading"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    name: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, name: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            name,
            message: message.into(),
        }
    }

    fn bad_request(name: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, name, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.name, "message": self.message}))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::DraftNotFound(_) | StoreError::SampleNotFound { .. } => StatusCode::NOT_FOUND,
            StoreError::IllegalTransition { .. } | StoreError::DuplicateDraft(_) => StatusCode::CONFLICT,
            StoreError::MissingEditText => StatusCode::BAD_REQUEST,
            StoreError::CorruptLog { .. } | StoreError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.name(), e.to_string())
    }
}

impl From<SamplerError> for ApiError {
    fn from(e: SamplerError) -> Self {
        let status = match e {
            SamplerError::Model(_) | SamplerError::Tokenizer(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.name(), e.to_string())
    }
}

impl From<EvalError> for ApiError {
    fn from(e: EvalError) -> Self {
        let status = match e {
            EvalError::NothingToScore | EvalError::InfiniteLoss { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.name(), e.to_string())
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("InvalidRequest", e.to_string()))
}

fn task_failed(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "TaskFailed", e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsRequest {
    pub max_tokens: Option<usize>,
    pub temperature: Option<f64>,
    pub top_k: Option<usize>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub stop_at_end_of_text: Option<bool>,
}

impl ParamsRequest {
    /// Fills defaults, draws a seed when none is given and checks bounds.
    fn resolve(&self) -> Result<GenerationParams, ApiError> {
        let d = GenerationParams::default();
        let p = GenerationParams {
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
            temperature: self.temperature.unwrap_or(d.temperature),
            top_k: self.top_k.unwrap_or(d.top_k),
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            seed: self.seed.unwrap_or_else(rand::random),
            stop_at_end_of_text: self.stop_at_end_of_text.unwrap_or(d.stop_at_end_of_text),
        };
        if !(1..=MAX_SAMPLES).contains(&p.n_samples) {
            return Err(ApiError::bad_request(
                "ConfigError",
                format!("n_samples must be between 1 and {MAX_SAMPLES}"),
            ));
        }
        if p.max_tokens > MAX_TOKENS {
            return Err(ApiError::bad_request(
                "ConfigError",
                format!("max_tokens must be at most {MAX_TOKENS}"),
            ));
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    #[serde(default)]
    pub prompt: String,
    pub template: TemplateKind,
    pub question: Option<String>,
    #[serde(default)]
    pub params: ParamsRequest,
    pub parent_draft_id: Option<Uuid>,
}

#[derive(Debug, Serialize)]
struct GenerateResponse {
    draft_id: Uuid,
    samples: Vec<String>,
    seed: u64,
    prompt_text: String,
}

async fn generate_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: GenerateRequest = parse_body(&body)?;
    let model = state.require_model()?;
    let template = match req.template {
        TemplateKind::Qa => PromptTemplate::QaDistractor {
            question: req.question.clone().unwrap_or_default(),
        },
        TemplateKind::Vignette => PromptTemplate::Vignette { stem: req.prompt.clone() },
        TemplateKind::Raw => PromptTemplate::Raw { text: req.prompt.clone() },
    };
    let prompt_text = render_template(&template)?;
    let params = req.params.resolve()?;
    if let Some(parent) = req.parent_draft_id {
        if state.store.get(parent).is_none() {
            return Err(StoreError::DraftNotFound(parent).into());
        }
    }
    let (text, p) = (prompt_text.clone(), params.clone());
    let samples = tokio::task::spawn_blocking(move || model.generate(&text, &p))
        .await
        .map_err(task_failed)??;
    let draft = ItemDraft::new(
        req.template,
        prompt_text.clone(),
        DraftParams {
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            top_k: params.top_k,
            n_samples: params.n_samples,
            seed: params.seed,
            stop_at_end_of_text: params.stop_at_end_of_text,
        },
        samples.clone(),
        req.parent_draft_id,
    );
    let draft = state.store.create(draft)?;
    let body = GenerateResponse {
        draft_id: draft.id,
        samples,
        seed: params.seed,
        prompt_text,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionRequest {
    action: Action,
    edited_text: Option<String>,
}

async fn transition_handler(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<ItemDraft>, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "DraftNotFound", format!("no draft {id}"));
    let id = Uuid::parse_str(&id).map_err(|_| not_found())?;
    let k: usize = k.parse().map_err(|_| {
        ApiError::new(StatusCode::NOT_FOUND, "SampleNotFound", format!("no sample {k}"))
    })?;
    if state.store.get(id).is_none() {
        return Err(StoreError::DraftNotFound(id).into());
    }
    let req: TransitionRequest = parse_body(&body)?;
    Ok(Json(state.store.transition(id, k, req.action, req.edited_text)?))
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list_handler(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ListQuery>,
) -> Result<Json<Vec<ItemDraft>>, ApiError> {
    let status = match q.status.as_deref() {
        None | Some("") => None,
        Some(s) => Some(SampleStatus::parse(s).ok_or_else(|| {
            ApiError::bad_request("InvalidRequest", format!("unknown status `{s}`"))
        })?),
    };
    Ok(Json(state.store.list(status)))
}

async fn get_draft_handler(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<ItemDraft>, ApiError> {
    Uuid::parse_str(&id)
        .ok()
        .and_then(|id| state.store.get(id))
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "DraftNotFound", format!("no draft {id}")))
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Response {
    match state.model() {
        Some(m) => Json(json!({"status": "ok", "checkpoint_hash": m.checkpoint_hash})).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"status": "loading"}))).into_response(),
    }
}

async fn model_handler(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ApiError> {
    Ok(Json(state.require_model()?.summary()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    text: String,
}

async fn score_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: ScoreRequest = parse_body(&body)?;
    if req.text.is_empty() {
        return Err(ApiError::bad_request("NothingToScore", "text is empty"));
    }
    let model = state.require_model()?;
    let report = tokio::task::spawn_blocking(move || model.score(&req.text))
        .await
        .map_err(task_failed)??;
    Ok(Json(json!({
        "tokens_scored": report.tokens_scored,
        "cross_entropy_nats": report.cross_entropy_nats,
        "perplexity": report.perplexity,
        "bits_per_token": report.bits_per_token(),
    }))
    .into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/generate", post(generate_handler))
        .route("/api/drafts", get(list_handler))
        .route("/api/drafts/{id}", get(get_draft_handler))
        .route("/api/drafts/{id}/samples/{k}", post(transition_handler))
        .route("/api/health", get(health_handler))
        .route("/api/model", get(model_handler))
        .route("/api/score", post(score_handler))
        .with_state(state)
}
