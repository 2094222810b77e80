//! HTTP JSON API over loaded checkpoints and the ray-launching oracle.
//!
//! `GET /api/models`, `POST /api/predict`, `POST /api/simulate`,
//! `POST /api/animate`. Errors are `{"error": {"code", "message"}}` with
//! an HTTP status derived from the code.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use radiomap_core::datapipe::{encode_input, NormalizationSpec};
use radiomap_core::raytrace::{simulate, CoverageGrid, PropagationConfig, DEFAULT_FLOOR_DBM, DEFAULT_REFLECTIONS};
use radiomap_core::scene::{scene_from_json_value, Scene};
use radiomap_core::trainer::CheckpointMeta;
use radiomap_nn::checkpoint::load_checkpoint;
use radiomap_nn::{Model, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::CliError;

/// Frozen weights plus the data contract they were trained under.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub meta: CheckpointMeta,
}

impl LoadedModel {
    /// Reads a checkpoint and its `.meta.json` sidecar.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let model = load_checkpoint(path)?;
        let meta = CheckpointMeta::load(path).map_err(|e| {
            CliError::new(
                "FORMAT",
                format!("checkpoint sidecar {}: {e}", CheckpointMeta::sidecar_path(path).display()),
            )
        })?;
        LoadedModel::new(model, meta)
    }

    pub fn new(model: Model, meta: CheckpointMeta) -> Result<Self, CliError> {
        if model.spec().hash() != meta.spec_hash {
            return Err(CliError::new(
                "MISMATCH",
                format!("sidecar for `{}` describes a different architecture", meta.model_id),
            ));
        }
        if model.spec().input_channels != meta.encoding.channels() {
            return Err(CliError::new(
                "MISMATCH",
                format!(
                    "model takes {} input channels, encoding `{}` gives {}",
                    model.spec().input_channels,
                    meta.encoding.name(),
                    meta.encoding.channels()
                ),
            ));
        }
        Ok(LoadedModel { model, meta })
    }
}

/// Model input for a whole scene; every transmitter is written into the
/// transmitter channel.
pub fn encode_scene(scene: &Scene, meta: &CheckpointMeta) -> Result<Tensor, CliError> {
    let s = meta.frame_size;
    if scene.width() != s || scene.height() != s {
        return Err(CliError::new(
            "DIM_MISMATCH",
            format!(
                "model `{}` expects a {s}x{s} scene, got {}x{}",
                meta.model_id,
                scene.width(),
                scene.height()
            ),
        ));
    }
    let txs: Vec<(usize, usize)> = scene.transmitters().iter().map(|t| (t.x, t.y)).collect();
    let x = encode_input(scene.region().occupancy(), s, &txs, meta.encoding)?;
    Ok(x.reshape(&[1, meta.encoding.channels(), s, s])?)
}

/// A coverage estimate in both normalized and dBm units, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub norm: Vec<f32>,
    pub dbm: Vec<f32>,
    pub latency_ms: f64,
}

impl Prediction {
    pub fn grid(&self) -> CoverageGrid {
        CoverageGrid {
            width: self.width,
            height: self.height,
            power_dbm: self.dbm.clone(),
        }
    }
}

/// One forward pass; normalized outputs are clamped to `[0, 1]`.
pub fn predict_scene(loaded: &LoadedModel, scene: &Scene) -> Result<Prediction, CliError> {
    let x = encode_scene(scene, &loaded.meta)?;
    let start = Instant::now();
    let y = loaded.model.forward(&x)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let norm: Vec<f32> = y.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let dbm = norm.iter().map(|&v| loaded.meta.norm.denormalize(v as f64) as f32).collect();
    Ok(Prediction {
        width: scene.width(),
        height: scene.height(),
        norm,
        dbm,
        latency_ms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub max_reflections: usize,
    pub floor_dbm: f64,
    /// Simulations allowed to run at once; further requests get 503.
    pub max_concurrent_sims: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_reflections: DEFAULT_REFLECTIONS,
            floor_dbm: DEFAULT_FLOOR_DBM,
            max_concurrent_sims: 2,
        }
    }
}

pub struct AppState {
    pub models: BTreeMap<String, Arc<LoadedModel>>,
    pub sims: Arc<Semaphore>,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(models: Vec<LoadedModel>, config: ServiceConfig) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for m in models {
            let id = m.meta.model_id.clone();
            if map.insert(id.clone(), Arc::new(m)).is_some() {
                return Err(CliError::new("CONFIG", format!("model id `{id}` loaded twice")));
            }
        }
        Ok(AppState {
            models: map,
            sims: Arc::new(Semaphore::new(config.max_concurrent_sims)),
            config,
        })
    }

    fn model(&self, id: &str) -> Result<Arc<LoadedModel>, ApiError> {
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_MODEL", format!("no model `{id}` is loaded")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/models", get(list_models))
        .route("/api/predict", post(predict))
        .route("/api/simulate", post(simulate_handler))
        .route("/api/animate", post(animate))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub expected_size: Option<usize>,
}

impl ApiError {
    fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.into(),
            message: message.into(),
            expected_size: None,
        }
    }

    fn from_cli(e: CliError, frame_size: Option<usize>) -> Self {
        let status = match e.code.as_str() {
            "UNKNOWN_MODEL" => StatusCode::NOT_FOUND,
            "BUSY" => StatusCode::SERVICE_UNAVAILABLE,
            "NN" | "IO" | "INTERNAL" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let expected_size = if e.code == "DIM_MISMATCH" { frame_size } else { None };
        ApiError {
            status,
            code: e.code,
            message: e.message,
            expected_size,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(s) = self.expected_size {
            err["expected_size"] = json!(s);
        }
        let body = Json(json!({ "error": err }));
        if self.status == StatusCode::SERVICE_UNAVAILABLE {
            (self.status, [(header::RETRY_AFTER, "1")], body).into_response()
        } else {
            (self.status, body).into_response()
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "PARSE", e.to_string()))
}

fn parse_scene(v: Value) -> Result<Scene, ApiError> {
    scene_from_json_value(v).map_err(|e| ApiError::from_cli(e.into(), None))
}

fn rows(data: &[f32], width: usize) -> Vec<Vec<f32>> {
    data.chunks(width.max(1)).map(<[f32]>::to_vec).collect()
}

fn internal(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string())
}

#[derive(Serialize)]
struct ModelInfo {
    model_id: String,
    frame_size: usize,
    input_channels: usize,
    encoding: &'static str,
    floor_dbm: f64,
    ceil_dbm: f64,
    parameter_count: usize,
    spec_hash: String,
}

async fn list_models(State(st): State<Arc<AppState>>) -> Json<Value> {
    let models: Vec<ModelInfo> = st
        .models
        .values()
        .map(|m| ModelInfo {
            model_id: m.meta.model_id.clone(),
            frame_size: m.meta.frame_size,
            input_channels: m.meta.encoding.channels(),
            encoding: m.meta.encoding.name(),
            floor_dbm: m.meta.norm.floor_dbm,
            ceil_dbm: m.meta.norm.ceil_dbm,
            parameter_count: m.model.count_params(),
            spec_hash: m.meta.spec_hash.clone(),
        })
        .collect();
    Json(json!({ "models": models }))
}

#[derive(Deserialize)]
struct PredictRequest {
    scene: Value,
    model_id: String,
}

fn prediction_json(p: &Prediction) -> Value {
    json!({
        "width": p.width,
        "height": p.height,
        "coverage_norm": rows(&p.norm, p.width),
        "coverage_dbm": rows(&p.dbm, p.width),
    })
}

async fn predict(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: PredictRequest = parse_body(&body)?;
    let loaded = st.model(&req.model_id)?;
    let scene = parse_scene(req.scene)?;
    let frame = loaded.meta.frame_size;
    let m = loaded.clone();
    let p = tokio::task::spawn_blocking(move || predict_scene(&m, &scene))
        .await
        .map_err(internal)?
        .map_err(|e| ApiError::from_cli(e, Some(frame)))?;
    let mut out = prediction_json(&p);
    out["model_id"] = json!(loaded.meta.model_id);
    out["latency_ms"] = json!(p.latency_ms);
    Ok(Json(out))
}

#[derive(Deserialize)]
struct SimulateRequest {
    scene: Value,
    #[serde(default)]
    model_id: Option<String>,
}

async fn simulate_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: SimulateRequest = parse_body(&body)?;
    let norm_from = match &req.model_id {
        Some(id) => Some(st.model(id)?.meta.norm),
        None => None,
    };
    let scene = parse_scene(req.scene)?;
    let permit = st.sims.clone().try_acquire_owned().map_err(|_| {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "BUSY", "simulation queue is full, retry shortly")
    })?;
    let mut cfg = PropagationConfig::for_grid(scene.width(), scene.height(), scene.region().cell_size_m());
    cfg.max_reflections = st.config.max_reflections;
    cfg.receiver_floor_dbm = st.config.floor_dbm;
    let start = Instant::now();
    let grid = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        simulate(&scene, &cfg)
    })
    .await
    .map_err(internal)?
    .map_err(|e| ApiError::from_cli(e.into(), None))?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let norm = match norm_from {
        Some(n) => n,
        None => {
            let peak = grid.power_dbm.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            NormalizationSpec::new(st.config.floor_dbm, peak.max(st.config.floor_dbm + 1.0))
                .map_err(|e| ApiError::from_cli(e.into(), None))?
        }
    };
    let (vals, _) = norm.normalize_all(&grid.power_dbm);
    Ok(Json(json!({
        "width": grid.width,
        "height": grid.height,
        "coverage_dbm": rows(&grid.power_dbm, grid.width),
        "coverage_norm": rows(&vals, grid.width),
        "floor_dbm": norm.floor_dbm,
        "ceil_dbm": norm.ceil_dbm,
        "latency_ms": latency_ms,
    })))
}

#[derive(Deserialize)]
struct AnimateRequest {
    scenes: Vec<Value>,
    model_id: String,
}

async fn animate(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: AnimateRequest = parse_body(&body)?;
    let loaded = st.model(&req.model_id)?;
    if req.scenes.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "EMPTY_SEQUENCE", "animation needs at least one scene"));
    }
    let scenes = req.scenes.into_iter().map(parse_scene).collect::<Result<Vec<_>, _>>()?;
    let (w, h) = (scenes[0].width(), scenes[0].height());
    if let Some(i) = scenes.iter().position(|s| (s.width(), s.height()) != (w, h)) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "MIXED_DIMS",
            format!("scene {i} is {}x{}, scene 0 is {w}x{h}", scenes[i].width(), scenes[i].height()),
        ));
    }
    let frame = loaded.meta.frame_size;
    let m = loaded.clone();
    let preds = tokio::task::spawn_blocking(move || scenes.iter().map(|s| predict_scene(&m, s)).collect::<Result<Vec<_>, _>>())
        .await
        .map_err(internal)?
        .map_err(|e| ApiError::from_cli(e, Some(frame)))?;
    let latency_ms: f64 = preds.iter().map(|p| p.latency_ms).sum();
    Ok(Json(json!({
        "model_id": loaded.meta.model_id,
        "frames": preds.iter().map(prediction_json).collect::<Vec<_>>(),
        "latency_ms": latency_ms,
    })))
}

/// Blocks serving `state` on `addr` until the process is stopped.
pub fn serve(state: AppState, addr: &str) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(state))).await?;
        Ok(())
    })
}
