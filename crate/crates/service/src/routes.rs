use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use exloop_core::game::{
    new_session, submit_frame, tick, FrameResult, GameMode, Matcher, NewSession, SessionState, TemplateMatcher,
    VerificationMatcher,
};
use exloop_core::orchestrator::{steering_probabilities, SteeringPolicy};
use exloop_core::{Image, NUM_CLASSES};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ErrorCode};
use crate::state::{AppState, StateSink, TrainJob, TrainRequest};

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/frames", post(post_frame))
        .route("/sessions/{id}/tick", post(post_tick))
        .route("/users/{id}/templates", post(post_templates))
        .route("/dataset/stats", get(dataset_stats))
        .route("/train", post(post_train))
        .route("/train/{id}", get(get_train))
        .route("/models", get(list_models))
        .route("/models/{id}/activate", post(activate_model));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .nest("/api/v1", api)
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub mode: GameMode,
    #[serde(default)]
    pub user_id: Option<String>,
    #[serde(default)]
    pub steering: Option<SteeringPolicy>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub lives: u32,
    pub score: u32,
    pub target: Option<exloop_core::ExpressionLabel>,
    pub deadline: Option<f64>,
}

async fn create_session(State(state): State<Shared>, Json(req): Json<CreateSession>) -> ApiResult<SessionCreated> {
    open_session(&state, req).map(Json)
}

/// Starts a session on the serving model with spawn probabilities steered by
/// the current harvest counts.
pub fn open_session(state: &AppState, req: CreateSession) -> Result<SessionCreated, ApiError> {
    let model = state.serving_model();
    let templates = req
        .user_id
        .as_deref()
        .filter(|_| req.mode == GameMode::Customized)
        .and_then(|u| state.templates.get(u, &model.id));
    let spawn = steering_probabilities(&state.harvest_counts(), req.steering.unwrap_or(SteeringPolicy::Uniform));
    let id = format!("s-{:016x}", rand::random::<u64>());
    let session = new_session(NewSession {
        id: id.clone(),
        mode: req.mode,
        user_id: req.user_id,
        templates: templates.as_deref(),
        spawn,
        seed: req.seed.unwrap_or_else(rand::random),
        now: 0.0,
    })?;
    let s = session.state();
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(SessionCreated {
        session_id: id,
        lives: s.lives,
        score: s.score,
        target: s.target,
        deadline: s.deadline,
    })
}

fn session(state: &AppState, id: &str) -> Result<Arc<Mutex<exloop_core::game::GameSession>>, ApiError> {
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("session {id}")))
}

async fn get_session(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionState> {
    let s = session(&state, &id)?;
    let s = s.lock().expect("session poisoned");
    Ok(Json(s.state()))
}

fn decode_frame(b64: &str) -> Result<Image, ApiError> {
    let bytes = STANDARD
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not base64: {e}")))?;
    Image::decode(&bytes).map_err(ApiError::from)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FrameRequest {
    pub image_b64: String,
    /// Seconds on the session's clock, which starts at 0 on creation.
    pub client_ts: f64,
}

/// Expires due targets at `client_ts`, then classifies the frame. A frame
/// that arrives after the last life was lost reports the game over once;
/// later frames are rejected.
pub fn handle_classify(state: &AppState, session_id: &str, req: &FrameRequest) -> Result<FrameResult, ApiError> {
    let image = decode_frame(&req.image_b64)?;
    if !req.client_ts.is_finite() {
        return Err(ApiError::bad_request("client_ts must be finite"));
    }
    let s = session(state, session_id)?;
    let mut s = s.lock().expect("session poisoned");
    if s.is_over() {
        return Err(exloop_core::Error::SessionClosed.into());
    }
    tick(&mut s, req.client_ts);
    if s.is_over() {
        return Ok(FrameResult {
            probabilities: None,
            matched: false,
            matched_target: None,
            score: s.score(),
            lives: 0,
            game_over: true,
            throttled: false,
        });
    }
    let model = state.serving_model();
    let templates;
    let verification;
    let template_matcher;
    let matcher: &dyn Matcher = match s.mode {
        GameMode::General => {
            verification = VerificationMatcher {
                model: &model,
                thresholds: &state.thresholds,
            };
            &verification
        }
        GameMode::Customized => {
            let user = s.user_id.clone().unwrap_or_default();
            templates = state.templates.get(&user, &model.id).ok_or_else(|| {
                ApiError::new(
                    ErrorCode::PreconditionFailed,
                    format!("templates of {user} do not match the serving model; register again"),
                )
            })?;
            template_matcher = TemplateMatcher {
                model: &model,
                templates: &templates,
            };
            &template_matcher
        }
    };
    Ok(submit_frame(&mut s, matcher, &image, req.client_ts, &mut StateSink(state))?)
}

async fn post_frame(State(state): State<Shared>, Path(id): Path<String>, Json(req): Json<FrameRequest>) -> ApiResult<FrameResult> {
    handle_classify(&state, &id, &req).map(Json)
}

#[derive(Debug, Deserialize)]
pub struct TickRequest {
    pub now: f64,
}

async fn post_tick(State(state): State<Shared>, Path(id): Path<String>, Json(req): Json<TickRequest>) -> ApiResult<SessionState> {
    if !req.now.is_finite() {
        return Err(ApiError::bad_request("now must be finite"));
    }
    let s = session(&state, &id)?;
    let mut s = s.lock().expect("session poisoned");
    tick(&mut s, req.now);
    Ok(Json(s.state()))
}

#[derive(Debug, Deserialize)]
pub struct TemplateRequest {
    pub images: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TemplatesRegistered {
    pub user_id: String,
    pub model_id: String,
    pub dim: usize,
}

async fn post_templates(
    State(state): State<Shared>,
    Path(user): Path<String>,
    Json(req): Json<TemplateRequest>,
) -> ApiResult<TemplatesRegistered> {
    if req.images.len() != NUM_CLASSES {
        return Err(ApiError::bad_request(format!("expected 7 images, got {}", req.images.len())));
    }
    let images = req.images.iter().map(|b| decode_frame(b)).collect::<Result<Vec<_>, _>>()?;
    let model = state.serving_model();
    let set = state.templates.register(&user, &images, &model, state.validity.as_ref())?;
    Ok(Json(TemplatesRegistered {
        user_id: user,
        model_id: set.model_id.0.clone(),
        dim: set.dim(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetStats {
    pub counts: [usize; NUM_CLASSES],
    pub total: usize,
}

async fn dataset_stats(State(state): State<Shared>) -> ApiResult<DatasetStats> {
    let counts = state.harvest_counts();
    Ok(Json(DatasetStats {
        counts,
        total: counts.iter().sum(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

async fn post_train(State(state): State<Shared>, Json(req): Json<TrainRequest>) -> ApiResult<JobCreated> {
    if !state.dataset_exists(&req.dataset_id) {
        return Err(ApiError::not_found(format!("dataset {}", req.dataset_id)));
    }
    if state.model(&req.base_model_id).is_none() {
        return Err(ApiError::not_found(format!("model {}", req.base_model_id)));
    }
    let job = state.submit_job(req);
    Ok(Json(JobCreated { job_id: job.job_id }))
}

async fn get_train(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<TrainJob> {
    state.job(&id).map(Json).ok_or_else(|| ApiError::not_found(format!("job {id}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelList {
    pub serving: String,
    pub models: Vec<String>,
}

async fn list_models(State(state): State<Shared>) -> ApiResult<ModelList> {
    Ok(Json(ModelList {
        serving: state.serving_model().id.0.clone(),
        models: state.model_ids(),
    }))
}

async fn activate_model(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<ModelList> {
    state.activate(&id).ok_or_else(|| ApiError::not_found(format!("model {id}")))?;
    list_models(State(state)).await
}
