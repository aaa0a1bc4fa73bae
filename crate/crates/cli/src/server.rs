//! JSON-over-HTTP session service.
//!
//! Sessions live in memory only, in an LRU map capped at
//! [`DEFAULT_MAX_SESSIONS`]; a restart forgets them. Each session sits behind
//! its own async mutex so requests against one session run one at a time,
//! while the shared engine is read-only and serves every session at once.
//! Refinement runs on the blocking pool.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use lru::LruCache;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sketchloop_core::metrics::MetricValues;
use sketchloop_core::refine::{IterationRecord, DEFAULT_GUIDANCE, DEFAULT_ITERATIONS, DEFAULT_STRENGTH};
use sketchloop_core::{Error as CoreError, GrayImage, ModelKind, RefinementConfig, RefinementEngine, RefinementSession};
use tokio::net::TcpListener;

use crate::models::LoadedEngine;

pub const DEFAULT_MAX_SESSIONS: usize = 64;
/// Environment variable holding the bind address.
pub const ADDR_ENV: &str = "SKETCHLOOP_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
const PGM_MIME: &str = "image/x-portable-graymap";

/// One stored session with its timestamps (seconds since the Unix epoch).
#[derive(Debug)]
pub struct SessionResource {
    pub session: RefinementSession,
    pub created_at: u64,
    pub updated_at: u64,
}

type Slot = Arc<tokio::sync::Mutex<SessionResource>>;

struct Inner {
    engine: RefinementEngine,
    trained: bool,
    sessions: Mutex<LruCache<String, Slot>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(loaded: LoadedEngine, max_sessions: usize) -> Self {
        let cap = NonZeroUsize::new(max_sessions.max(1)).expect("non-zero");
        Self {
            inner: Arc::new(Inner {
                engine: loaded.engine,
                trained: loaded.trained,
                sessions: Mutex::new(LruCache::new(cap)),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    fn lookup(&self, id: &str) -> Result<Slot, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().expect("session map lock").len()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session_summary).delete(delete_session))
        .route("/v1/sessions/{id}/iterations", post(add_iteration))
        .route("/v1/sessions/{id}/iterations/{n}/image", get(iteration_image))
        .with_state(state)
}

/// Serves until the listener fails or the process receives Ctrl-C.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

// ----- errors ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>, fields: Vec<FieldError>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            fields,
        }
    }

    fn not_found(id: &str) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: format!("no session {id}"),
            fields: Vec::new(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
            fields: Vec::new(),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::DegenerateCombination => Self::unprocessable(e.to_string()),
            CoreError::Validation(_) | CoreError::ImageDecode(_) => Self::bad_request(e.to_string(), Vec::new()),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if !self.fields.is_empty() {
            body["fields"] = json!(self.fields);
        }
        (self.status, Json(body)).into_response()
    }
}

// ----- request parsing -------------------------------------------------------------

/// Validated body of `POST /v1/sessions`.
#[derive(Debug)]
struct CreateRequest {
    description: String,
    image: GrayImage,
    reference: Option<GrayImage>,
    config: RefinementConfig,
}

fn json_object(body: &[u8], allow_empty: bool) -> Result<Map<String, Value>, ApiError> {
    if allow_empty && body.iter().all(u8::is_ascii_whitespace) {
        return Ok(Map::new());
    }
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad_request("request body must be a JSON object", Vec::new())),
        Err(e) => Err(ApiError::bad_request(format!("request body is not valid JSON: {e}"), Vec::new())),
    }
}

struct Fields {
    map: Map<String, Value>,
    errors: Vec<FieldError>,
}

impl Fields {
    fn new(map: Map<String, Value>, known: &[&str]) -> Self {
        let errors = map
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .map(|k| FieldError {
                field: k.clone(),
                message: "unknown field".into(),
            })
            .collect();
        Self { map, errors }
    }

    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    /// Present, non-null value of `field`.
    fn get(&self, field: &str) -> Option<&Value> {
        self.map.get(field).filter(|v| !v.is_null())
    }

    fn string(&mut self, field: &str, required: bool) -> Option<String> {
        match self.get(field).cloned() {
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                self.fail(field, "must be a string");
                None
            }
            None => {
                if required {
                    self.fail(field, "is required");
                }
                None
            }
        }
    }

    fn number(&mut self, field: &str) -> Option<f64> {
        match self.get(field) {
            Some(v) => match v.as_f64() {
                Some(x) => Some(x),
                None => {
                    self.fail(field, "must be a number");
                    None
                }
            },
            None => None,
        }
    }

    fn image(&mut self, field: &str, required: bool) -> Option<GrayImage> {
        let text = self.string(field, required)?;
        let bytes = match B64.decode(text.trim()) {
            Ok(b) => b,
            Err(e) => {
                self.fail(field, format!("invalid base64: {e}"));
                return None;
            }
        };
        match GrayImage::decode(&bytes) {
            Ok(img) => Some(img),
            Err(e) => {
                self.fail(field, e.to_string());
                None
            }
        }
    }

    fn finish(self) -> Result<(), ApiError> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(ApiError::bad_request("invalid request body", self.errors))
        }
    }
}

fn parse_model_kind(v: &Value) -> Option<ModelKind> {
    match v {
        Value::String(s) => s.parse().ok(),
        Value::Number(n) => match n.as_u64() {
            Some(1) => Some(ModelKind::Model1),
            Some(2) => Some(ModelKind::Model2),
            Some(3) => Some(ModelKind::Model3),
            _ => None,
        },
        _ => None,
    }
}

fn parse_create(body: &[u8]) -> Result<CreateRequest, ApiError> {
    const KNOWN: [&str; 7] = [
        "description",
        "image_base64",
        "reference_base64",
        "model_kind",
        "strength",
        "guidance_scale",
        "seed",
    ];
    let mut f = Fields::new(json_object(body, false)?, &KNOWN);
    let description = f.string("description", true);
    if description.as_deref().is_some_and(|d| d.trim().is_empty()) {
        f.fail("description", "must not be empty");
    }
    let image = f.image("image_base64", true);
    let reference = f.image("reference_base64", false);

    let model_kind = match f.get("model_kind").cloned() {
        None => {
            f.fail("model_kind", "is required");
            None
        }
        Some(v) => {
            let kind = parse_model_kind(&v);
            if kind.is_none() {
                f.fail("model_kind", "must be one of model1, model2, model3");
            }
            kind
        }
    };
    let strength = f.number("strength").unwrap_or(f64::from(DEFAULT_STRENGTH));
    if !(0.0..=1.0).contains(&strength) {
        f.fail("strength", "must lie in [0, 1]");
    }
    let guidance = f.number("guidance_scale").unwrap_or(f64::from(DEFAULT_GUIDANCE));
    if !(guidance >= 0.0 && guidance.is_finite()) {
        f.fail("guidance_scale", "must be a non-negative number");
    }
    let seed = match f.get("seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            f.fail("seed", "must be a non-negative integer");
            0
        }),
    };
    f.finish()?;
    Ok(CreateRequest {
        description: description.expect("validated"),
        image: image.expect("validated"),
        reference,
        config: RefinementConfig {
            strength: strength as f32,
            guidance_scale: guidance as f32,
            iterations: DEFAULT_ITERATIONS,
            model_kind: model_kind.expect("validated"),
            seed,
        },
    })
}

fn parse_feedback(body: &[u8]) -> Result<Option<String>, ApiError> {
    let mut f = Fields::new(json_object(body, true)?, &["feedback_text"]);
    let text = f.string("feedback_text", false);
    f.finish()?;
    Ok(text)
}

// ----- responses ----------------------------------------------------------------

/// Metric values with `+∞` PSNR sent as `null`.
fn metric_json(m: &MetricValues) -> Value {
    json!({
        "ssim": m.ssim,
        "psnr": finite_or_null(m.psnr),
        "clip_score": m.clip_score,
        "perceptual_distance": m.perceptual_distance,
    })
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn series<'a>(values: impl Iterator<Item = &'a MetricValues> + Clone) -> Value {
    json!({
        "ssim": values.clone().map(|m| m.ssim).collect::<Vec<_>>(),
        "psnr": values.clone().map(|m| finite_or_null(m.psnr)).collect::<Vec<_>>(),
        "clip_score": values.clone().map(|m| m.clip_score).collect::<Vec<_>>(),
        "perceptual_distance": values.map(|m| m.perceptual_distance).collect::<Vec<_>>(),
    })
}

fn iteration_json(r: &IterationRecord) -> Value {
    json!({
        "iteration_index": r.index,
        "prompt": r.prompt,
        "metrics": {
            "previous_iteration": metric_json(&r.metrics.previous),
            "ground_truth": r.metrics.ground_truth.as_ref().map(metric_json),
        },
        "image_base64": B64.encode(r.image.to_pgm()),
    })
}

fn summary_json(id: &str, res: &SessionResource) -> Value {
    let s = &res.session;
    let ground_truth = if s.reference.is_some() {
        series(s.records.iter().filter_map(|r| r.metrics.ground_truth.as_ref()))
    } else {
        Value::Null
    };
    json!({
        "session_id": id,
        "description": s.description,
        "model_kind": s.config.model_kind,
        "strength": s.config.strength,
        "guidance_scale": s.config.guidance_scale,
        "seed": s.config.seed,
        "iterations": s.records.len(),
        "has_reference": s.reference.is_some(),
        "created_at": res.created_at,
        "updated_at": res.updated_at,
        "prompts": s.records.iter().map(|r| r.prompt.clone()).collect::<Vec<_>>(),
        "feedback": s.records.iter().map(|r| r.feedback.clone()).collect::<Vec<_>>(),
        "metrics": {
            "previous_iteration": series(s.records.iter().map(|r| &r.metrics.previous)),
            "ground_truth": ground_truth,
        },
    })
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

// ----- handlers -------------------------------------------------------------------

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req = parse_create(&body)?;
    if req.config.model_kind != ModelKind::Model1 && !state.inner.trained {
        return Err(ApiError::unprocessable(format!(
            "{} needs trained encoders, but the service was started without a checkpoint",
            req.config.model_kind
        )));
    }
    let n = state.inner.next_id.fetch_add(1, Ordering::Relaxed);
    let id = format!("s{n:06}");
    let session = state
        .inner
        .engine
        .start(id.clone(), &req.description, &req.image, req.reference.as_ref(), req.config)?;
    let t = now();
    let slot = Arc::new(tokio::sync::Mutex::new(SessionResource {
        session,
        created_at: t,
        updated_at: t,
    }));
    let evicted = state.inner.sessions.lock().expect("session map lock").push(id.clone(), slot);
    if let Some((old, _)) = evicted.filter(|(k, _)| k != &id) {
        tracing::info!(session = %old, "evicted least recently used session");
    }
    tracing::info!(session = %id, "created session");
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn add_iteration(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let feedback = parse_feedback(&body)?;
    let slot = state.lookup(&id)?;
    let mut guard = slot.lock_owned().await;
    let engine = state.inner.engine.clone();
    let result = tokio::task::spawn_blocking(move || {
        let out = engine.step(&mut guard.session, feedback.as_deref()).map(iteration_json);
        if out.is_ok() {
            guard.updated_at = now();
        }
        out
    })
    .await
    .map_err(|e| ApiError::internal(format!("refinement task failed: {e}")))?;
    Ok(Json(result?))
}

async fn session_summary(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let slot = state.lookup(&id)?;
    let res = slot.lock().await;
    Ok(Json(summary_json(&id, &res)))
}

async fn iteration_image(State(state): State<AppState>, Path((id, n)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let slot = state.lookup(&id)?;
    let res = slot.lock().await;
    let image = res.session.image(n).ok_or_else(|| ApiError {
        status: StatusCode::NOT_FOUND,
        message: format!("session {id} has no iteration {n}"),
        fields: Vec::new(),
    })?;
    Ok(([(header::CONTENT_TYPE, PGM_MIME)], image.to_pgm()).into_response())
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.inner.sessions.lock().expect("session map lock").pop(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm_b64() -> String {
        B64.encode(GrayImage::filled(8, 8, 100).to_pgm())
    }

    #[test]
    fn create_body_collects_every_field_error() {
        let body = json!({"description": "", "image_base64": "!!", "model_kind": "model9", "strength": 2.0, "extra": 1});
        let err = parse_create(body.to_string().as_bytes()).unwrap_err();
        assert_eq!(err.status, StatusCode::BAD_REQUEST);
        let fields: Vec<&str> = err.fields.iter().map(|f| f.field.as_str()).collect();
        for f in ["extra", "description", "image_base64", "model_kind", "strength"] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn create_body_defaults() {
        let body = json!({"description": "a man", "image_base64": pgm_b64(), "model_kind": 1});
        let req = parse_create(body.to_string().as_bytes()).unwrap();
        assert_eq!(req.config.model_kind, ModelKind::Model1);
        assert_eq!(req.config.strength, DEFAULT_STRENGTH);
        assert_eq!(req.config.guidance_scale, DEFAULT_GUIDANCE);
        assert_eq!(req.config.seed, 0);
    }

    #[test]
    fn feedback_body_may_be_empty_or_null() {
        assert_eq!(parse_feedback(b"").unwrap(), None);
        assert_eq!(parse_feedback(br#"{"feedback_text": null}"#).unwrap(), None);
        assert_eq!(parse_feedback(br#"{"feedback_text": "older"}"#).unwrap().as_deref(), Some("older"));
        assert!(parse_feedback(br#"{"feedback_text": 3}"#).is_err());
        assert!(parse_feedback(b"[1]").is_err());
    }

    #[test]
    fn infinite_psnr_becomes_null() {
        assert_eq!(finite_or_null(f64::INFINITY), Value::Null);
        assert_eq!(finite_or_null(12.5), json!(12.5));
    }
}
