//! Session service for interactive bottleneck manipulation.
//!
//! A session holds the canonical-frame bottleneck aggregated from one or
//! more posed photos. Every decode re-derives its output from that base, a
//! manipulation script and a view pose, so sessions never drift.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/session` | `{model?, views: [{image, pose}], background?}` | `{id, model, views}` |
//! | POST | `/session/{id}/decode` | `{script?, pose?, occupancy?}` | `image/png` |
//! | GET | `/session/{id}/mesh?threshold=τ` | | OBJ text |
//! | GET | `/models` | | `[{id, arch, param_count}]` |
//! | GET | `/healthz` | | `{status}` |
//!
//! Images travel as base64 PNG (a `data:` URL prefix is accepted).

pub mod pngio;

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tbn_core::flow::RigidPose;
use tbn_core::recon::{extract_mesh, Mesh};
use tbn_core::script::{apply_script, decode_scripted, Script};
use tbn_core::{FeatureVolume32, ImagePlane32, TbnError, TbnModel32};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const MAX_SESSIONS: usize = 32;
pub const DEFAULT_MODEL: &str = "default";
pub const OCCUPANCY_HEADER: &str = "x-occupancy";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

/// A live manipulation session. The base bottleneck never changes; the
/// script of the most recent decode is kept for mesh export.
pub struct Session {
    pub id: String,
    pub model_id: String,
    model: Arc<TbnModel32>,
    base: FeatureVolume32,
    background: Option<ImagePlane32>,
    script: tokio::sync::Mutex<Script>,
}

impl Session {
    pub fn new(
        id: String,
        model_id: String,
        model: Arc<TbnModel32>,
        views: &[(ImagePlane32, RigidPose)],
        background: Option<ImagePlane32>,
    ) -> tbn_core::Result<Self> {
        let base = model.aggregate_views(views, &RigidPose::identity())?;
        if let Some(bg) = &background {
            let s = model.arch().image_size;
            if bg.height() != s || bg.width() != s {
                return Err(TbnError::Shape(format!("background must be {s}x{s}")));
            }
        }
        Ok(Self {
            id,
            model_id,
            model,
            base,
            background,
            script: tokio::sync::Mutex::new(Script::new()),
        })
    }

    pub fn base(&self) -> &FeatureVolume32 {
        &self.base
    }

    /// RGB image of the scripted base seen from `pose`, composited over the
    /// background through the predicted mask when one is set.
    pub fn render(&self, script: &Script, pose: &RigidPose) -> tbn_core::Result<ImagePlane32> {
        let out = decode_scripted(&self.model, &self.base, script, pose)?;
        match &self.background {
            Some(bg) => out.composite_over(bg),
            None => out.rgb(),
        }
    }

    /// Canonical-frame occupancy of the scripted base.
    pub fn occupancy(&self, script: &Script) -> tbn_core::Result<FeatureVolume32> {
        self.model.decode_occupancy(&apply_script(&self.base, script, &RigidPose::identity())?)
    }

    pub fn mesh(&self, script: &Script, threshold: f64) -> tbn_core::Result<Mesh> {
        extract_mesh(&self.occupancy(script)?, threshold)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OccupancySummary {
    pub mean: f64,
    pub max: f64,
    pub above_half: usize,
}

impl OccupancySummary {
    pub fn of(v: &FeatureVolume32) -> Self {
        let d = v.data();
        Self {
            mean: d.iter().map(|&x| f64::from(x)).sum::<f64>() / d.len().max(1) as f64,
            max: d.iter().fold(0.0f64, |m, &x| m.max(f64::from(x))),
            above_half: d.iter().filter(|&&x| x > 0.5).count(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    models: Arc<BTreeMap<String, Arc<TbnModel32>>>,
    sessions: Arc<Mutex<LruCache<String, Arc<Session>>>>,
    cors_origin: Option<String>,
}

impl AppState {
    pub fn new(models: BTreeMap<String, TbnModel32>) -> Self {
        Self::with_capacity(models, MAX_SESSIONS)
    }

    pub fn with_capacity(models: BTreeMap<String, TbnModel32>, max_sessions: usize) -> Self {
        let cap = NonZeroUsize::new(max_sessions.max(1)).expect("positive");
        Self {
            models: Arc::new(models.into_iter().map(|(k, m)| (k, Arc::new(m))).collect()),
            sessions: Arc::new(Mutex::new(LruCache::new(cap))),
            cors_origin: None,
        }
    }

    /// Loads `(id, checkpoint path)` pairs.
    pub fn from_checkpoints(paths: &[(String, &Path)]) -> tbn_core::Result<Self> {
        let mut models = BTreeMap::new();
        for (id, p) in paths {
            models.insert(id.clone(), tbn_core::io::load_model(p)?);
        }
        Ok(Self::new(models))
    }

    /// Restricts CORS to one origin instead of any.
    pub fn with_cors_origin(mut self, origin: impl Into<String>) -> Self {
        self.cors_origin = Some(origin.into());
        self
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().expect("session table").get(id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table").len()
    }

    pub fn model(&self, id: &str) -> Option<Arc<TbnModel32>> {
        self.models.get(id).cloned()
    }

    fn insert(&self, s: Session) -> Arc<Session> {
        let s = Arc::new(s);
        self.sessions.lock().expect("session table").put(s.id.clone(), s.clone());
        s
    }
}

pub fn router(state: AppState) -> Router {
    let origin = match &state.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::any(),
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(Any)
        .allow_headers(Any)
        .expose_headers([header::HeaderName::from_static(OCCUPANCY_HEADER)]);
    Router::new()
        .route("/healthz", get(healthz))
        .route("/models", get(models))
        .route("/session", post(create_session))
        .route("/session/{id}/decode", post(decode))
        .route("/session/{id}/mesh", get(mesh))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn models(State(state): State<AppState>) -> Json<Value> {
    let list: Vec<Value> = state
        .models
        .iter()
        .map(|(id, m)| json!({ "id": id, "arch": m.arch(), "param_count": m.param_count() }))
        .collect();
    Json(Value::Array(list))
}

#[derive(Deserialize)]
struct PosedImage {
    image: String,
    pose: RigidPose,
}

#[derive(Deserialize)]
struct CreateSession {
    #[serde(default = "default_model")]
    model: String,
    views: Vec<PosedImage>,
    #[serde(default)]
    background: Option<String>,
}

fn default_model() -> String {
    DEFAULT_MODEL.into()
}

fn bad(e: impl std::fmt::Display) -> ApiError {
    ApiError::BadRequest(e.to_string())
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: CreateSession = serde_json::from_slice(&body).map_err(bad)?;
    let model = state
        .model(&req.model)
        .ok_or_else(|| ApiError::NotFound(format!("unknown model {:?}", req.model)))?;
    if req.views.is_empty() {
        return Err(bad("at least one posed image is required"));
    }
    let mut views = Vec::with_capacity(req.views.len());
    for v in &req.views {
        if !v.pose.is_finite() {
            return Err(bad("pose values must be finite"));
        }
        views.push((pngio::decode_base64_png(&v.image).map_err(bad)?, v.pose));
    }
    let background = req
        .background
        .as_deref()
        .map(pngio::decode_base64_png)
        .transpose()
        .map_err(bad)?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let model_id = req.model.clone();
    let n = views.len();
    let session = tokio::task::spawn_blocking(move || Session::new(id, model_id, model, &views, background))
        .await
        .map_err(internal)?
        .map_err(bad)?;
    let s = state.insert(session);
    Ok(Json(json!({ "id": s.id, "model": s.model_id, "views": n })))
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<Session>, ApiError> {
    state
        .session(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
}

/// Splits a decode body into script, pose and the occupancy flag.
fn parse_decode(body: &[u8]) -> Result<(Script, RigidPose, bool), ApiError> {
    let v: Value = serde_json::from_slice(body).map_err(bad)?;
    let obj = v.as_object().ok_or_else(|| bad("decode body must be a JSON object"))?;
    let pose = match obj.get("pose") {
        Some(p) => serde_json::from_value::<RigidPose>(p.clone()).map_err(bad)?,
        None => RigidPose::identity(),
    };
    if !pose.is_finite() {
        return Err(bad("pose values must be finite"));
    }
    let script = match obj.get("script") {
        Some(s) => serde_json::from_value::<Script>(s.clone()).map_err(|e| ApiError::Unprocessable(format!("invalid script: {e}")))?,
        None => Script::new(),
    };
    let occupancy = obj.get("occupancy").and_then(Value::as_bool).unwrap_or(false);
    Ok((script, pose, occupancy))
}

fn script_error(e: TbnError) -> ApiError {
    match e {
        TbnError::InvalidArgument(m) => ApiError::Unprocessable(format!("invalid script entry: {m}")),
        other => internal(other),
    }
}

async fn decode(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let (script, pose, want_occ) = parse_decode(&body)?;
    // one decode per session at a time
    let mut current = session.script.lock().await;
    let worker = session.clone();
    let job_script = script.clone();
    let (png, summary) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let image = worker.render(&job_script, &pose).map_err(script_error)?;
        let png = pngio::encode_png(&image).map_err(internal)?;
        let summary = if want_occ {
            Some(OccupancySummary::of(&worker.occupancy(&job_script).map_err(script_error)?))
        } else {
            None
        };
        Ok((png, summary))
    })
    .await
    .map_err(internal)??;
    *current = script;
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    if let Some(s) = summary {
        let text = serde_json::to_string(&s).map_err(internal)?;
        resp.headers_mut()
            .insert(OCCUPANCY_HEADER, HeaderValue::from_str(&text).map_err(internal)?);
    }
    Ok(resp)
}

#[derive(Deserialize)]
struct MeshQuery {
    threshold: Option<f64>,
}

async fn mesh(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MeshQuery>,
) -> Result<Response, ApiError> {
    let session = lookup(&state, &id)?;
    let threshold = q.threshold.unwrap_or(0.5);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ApiError::Unprocessable(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let current = session.script.lock().await;
    let script = current.clone();
    let worker = session.clone();
    let obj = tokio::task::spawn_blocking(move || worker.mesh(&script, threshold).map(|m| m.to_obj()))
        .await
        .map_err(internal)?
        .map_err(script_error)?;
    drop(current);
    Ok(([(header::CONTENT_TYPE, "model/obj")], obj).into_response())
}
