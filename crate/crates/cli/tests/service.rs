use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use radiomap_cli::service::{encode_scene, predict_scene, router, AppState, LoadedModel, ServiceConfig};
use radiomap_core::datapipe::{EncodingScheme, NormalizationSpec};
use radiomap_core::scene::{scene_to_json_value, RegionMap, Scene, Transmitter};
use radiomap_core::trainer::CheckpointMeta;
use radiomap_nn::model::{unet_si, DEFAULT_KERNEL_SET};
use radiomap_nn::Model;
use serde_json::{json, Value};
use tower::ServiceExt;

const FLOOR: f64 = -100.0;

fn loaded() -> LoadedModel {
    let spec = unet_si(37, &DEFAULT_KERNEL_SET, 0.125, 2).unwrap();
    let meta = CheckpointMeta {
        model_id: "unet-si-37-32".into(),
        spec_hash: spec.hash(),
        frame_size: 32,
        encoding: EncodingScheme::TwoBinary,
        norm: NormalizationSpec::new(FLOOR, 13.0).unwrap(),
    };
    LoadedModel::new(Model::init(spec, 5).unwrap(), meta).unwrap()
}

fn state(cfg: ServiceConfig) -> Arc<AppState> {
    Arc::new(AppState::new(vec![loaded()], cfg).unwrap())
}

fn block_scene(size: usize, block_x: usize, txs: &[(usize, usize)]) -> Scene {
    let mut r = RegionMap::empty(size, size);
    r.fill_rect(block_x, 12, 4, 6);
    r.fill_rect(2, 2, 5, 3);
    Scene::new(r, txs.iter().map(|&(x, y)| Transmitter::new(x, y)).collect(), "t").unwrap()
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Option<String>, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let retry = resp.headers().get("retry-after").map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, retry, serde_json::from_slice(&bytes).unwrap())
}

fn grid(v: &Value, key: &str) -> Vec<Vec<f64>> {
    serde_json::from_value(v[key].clone()).unwrap()
}

#[tokio::test]
async fn models_endpoint_lists_frame_sizes() {
    let st = state(ServiceConfig::default());
    let (status, _, body) = call(&st, "GET", "/api/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let m = &body["models"][0];
    assert_eq!(m["model_id"], "unet-si-37-32");
    assert_eq!(m["frame_size"], 32);
    assert_eq!(m["input_channels"], 2);
    assert_eq!(m["encoding"], "two-binary");
    assert_eq!(m["floor_dbm"], FLOOR);
}

#[tokio::test]
async fn predict_returns_grids_shaped_like_the_scene() {
    let st = state(ServiceConfig::default());
    let scene = block_scene(32, 20, &[(10, 20)]);
    let req = json!({ "scene": scene_to_json_value(&scene), "model_id": "unet-si-37-32" });
    let (status, _, body) = call(&st, "POST", "/api/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["model_id"], "unet-si-37-32");
    assert!(body["latency_ms"].as_f64().unwrap() >= 0.0);
    let norm = grid(&body, "coverage_norm");
    let dbm = grid(&body, "coverage_dbm");
    assert_eq!(norm.len(), 32);
    assert!(norm.iter().chain(&dbm).all(|r| r.len() == 32));
    for (rn, rd) in norm.iter().zip(&dbm) {
        for (&n, &d) in rn.iter().zip(rd) {
            assert!((0.0..=1.0).contains(&n));
            assert!((d - (FLOOR + n * (13.0 - FLOOR))).abs() < 1e-3);
        }
    }
}

#[tokio::test]
async fn two_transmitters_superimpose_in_one_channel() {
    let st = state(ServiceConfig::default());
    let scene = block_scene(32, 20, &[(10, 20), (25, 5)]);
    let x = encode_scene(&scene, &st.models["unet-si-37-32"].meta).unwrap();
    assert_eq!(x.shape(), &[1, 2, 32, 32]);
    let tx_sum: f32 = x.data()[32 * 32..].iter().sum();
    assert_eq!(tx_sum, 2.0);
    let req = json!({ "scene": scene_to_json_value(&scene), "model_id": "unet-si-37-32" });
    let (status, _, body) = call(&st, "POST", "/api/predict", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(grid(&body, "coverage_dbm").len(), 32);
}

#[tokio::test]
async fn identical_requests_give_identical_payloads() {
    let st = state(ServiceConfig::default());
    let scene = block_scene(32, 18, &[(8, 8)]);
    let req = json!({ "scene": scene_to_json_value(&scene), "model_id": "unet-si-37-32" });
    let (_, _, a) = call(&st, "POST", "/api/predict", Some(req.clone())).await;
    let (_, _, b) = call(&st, "POST", "/api/predict", Some(req)).await;
    assert_eq!(a["coverage_norm"], b["coverage_norm"]);
    assert_eq!(a["coverage_dbm"], b["coverage_dbm"]);
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let st = state(ServiceConfig::default());
    let scene = scene_to_json_value(&block_scene(32, 20, &[(10, 20)]));

    let (s, _, body) = call(&st, "POST", "/api/predict", Some(json!({ "scene": scene, "model_id": "nope" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "UNKNOWN_MODEL");

    let small = scene_to_json_value(&block_scene(24, 14, &[(5, 5)]));
    let (s, _, body) = call(&st, "POST", "/api/predict", Some(json!({ "scene": small, "model_id": "unet-si-37-32" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "DIM_MISMATCH");
    assert_eq!(body["error"]["expected_size"], 32);

    let (s, _, body) = call(&st, "POST", "/api/predict", Some(json!({ "model_id": "unet-si-37-32" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "PARSE");

    let mut on_building = scene.clone();
    on_building["transmitters"][0]["x"] = json!(21);
    on_building["transmitters"][0]["y"] = json!(13);
    let (s, _, body) =
        call(&st, "POST", "/api/predict", Some(json!({ "scene": on_building, "model_id": "unet-si-37-32" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "PARSE");
    assert!(body["error"]["message"].as_str().unwrap().contains("transmitters[0]"));
}

#[tokio::test]
async fn simulate_is_symmetric_and_repeatable() {
    let st = state(ServiceConfig::default());
    let scene = Scene::new(RegionMap::empty(33, 33), vec![Transmitter::new(16, 16)], "empty").unwrap();
    let req = json!({ "scene": scene_to_json_value(&scene) });
    let (status, _, a) = call(&st, "POST", "/api/simulate", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    let g = grid(&a, "coverage_dbm");
    for d in [3, 7, 12] {
        let ring = [g[16][16 + d], g[16][16 - d], g[16 + d][16], g[16 - d][16]];
        for v in ring {
            assert!((v - ring[0]).abs() <= 0.5, "d={d}: {ring:?}");
        }
    }
    let n = grid(&a, "coverage_norm");
    assert!(n.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    let (_, _, b) = call(&st, "POST", "/api/simulate", Some(req)).await;
    assert_eq!(a["coverage_dbm"], b["coverage_dbm"]);
    assert_eq!(a["coverage_norm"], b["coverage_norm"]);
}

#[tokio::test]
async fn simulate_blocked_half_plane_sits_at_floor() {
    let st = state(ServiceConfig {
        max_reflections: 0,
        ..ServiceConfig::default()
    });
    let mut r = RegionMap::empty(32, 32);
    r.fill_rect(16, 0, 2, 32);
    let scene = Scene::new(r, vec![Transmitter::new(6, 16)], "wall").unwrap();
    let req = json!({ "scene": scene_to_json_value(&scene), "model_id": "unet-si-37-32" });
    let (status, _, body) = call(&st, "POST", "/api/simulate", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let g = grid(&body, "coverage_dbm");
    for row in &g {
        assert!(row[18..].iter().all(|&v| v == FLOOR));
        assert!(row[..16].iter().all(|&v| v > FLOOR));
    }
    assert_eq!(body["ceil_dbm"], 13.0);
}

#[tokio::test]
async fn saturated_simulation_queue_asks_to_retry() {
    let st = state(ServiceConfig {
        max_concurrent_sims: 1,
        ..ServiceConfig::default()
    });
    let _held = st.sims.clone().try_acquire_owned().unwrap();
    let scene = block_scene(32, 20, &[(10, 20)]);
    let (s, retry, body) = call(&st, "POST", "/api/simulate", Some(json!({ "scene": scene_to_json_value(&scene) }))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(retry.as_deref(), Some("1"));
    assert_eq!(body["error"]["code"], "BUSY");
}

#[tokio::test]
async fn animate_returns_frames_in_order() {
    let st = state(ServiceConfig::default());
    let scenes: Vec<Scene> = [24, 18, 12, 6].iter().map(|&bx| block_scene(32, bx, &[(28, 28)])).collect();
    let req = json!({
        "scenes": scenes.iter().map(scene_to_json_value).collect::<Vec<_>>(),
        "model_id": "unet-si-37-32",
    });
    let (status, _, body) = call(&st, "POST", "/api/animate", Some(req)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let frames = body["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 4);
    for (f, s) in frames.iter().zip(&scenes) {
        let req = json!({ "scene": scene_to_json_value(s), "model_id": "unet-si-37-32" });
        let (_, _, single) = call(&st, "POST", "/api/predict", Some(req)).await;
        assert_eq!(f["coverage_dbm"], single["coverage_dbm"]);
        assert_eq!(grid(f, "coverage_norm").len(), 32);
    }
}

#[tokio::test]
async fn animate_of_identical_scenes_repeats_the_grid() {
    let st = state(ServiceConfig::default());
    let s = scene_to_json_value(&block_scene(32, 20, &[(10, 20)]));
    let (_, _, body) =
        call(&st, "POST", "/api/animate", Some(json!({ "scenes": [s.clone(), s.clone(), s], "model_id": "unet-si-37-32" })))
            .await;
    let frames = body["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 3);
    assert!(frames.iter().all(|f| f["coverage_norm"] == frames[0]["coverage_norm"]));
}

#[tokio::test]
async fn animate_rejects_mixed_dims_and_empty_sequences() {
    let st = state(ServiceConfig::default());
    let a = scene_to_json_value(&block_scene(32, 20, &[(10, 20)]));
    let b = scene_to_json_value(&block_scene(24, 14, &[(5, 5)]));
    let (s, _, body) = call(&st, "POST", "/api/animate", Some(json!({ "scenes": [a, b], "model_id": "unet-si-37-32" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "MIXED_DIMS");
    let (s, _, body) = call(&st, "POST", "/api/animate", Some(json!({ "scenes": [], "model_id": "unet-si-37-32" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "EMPTY_SEQUENCE");
}

#[test]
fn predict_latency_at_32_is_interactive() {
    let m = loaded();
    let scene = block_scene(32, 20, &[(10, 20)]);
    predict_scene(&m, &scene).unwrap();
    let mut times: Vec<f64> = (0..9).map(|_| predict_scene(&m, &scene).unwrap().latency_ms).collect();
    times.sort_by(f64::total_cmp);
    assert!(times[4] < 200.0, "median latency {} ms", times[4]);
}

#[test]
fn sidecar_for_another_architecture_is_rejected() {
    let m = loaded();
    let mut meta = m.meta.clone();
    meta.spec_hash = "0".repeat(64);
    assert_eq!(LoadedModel::new(m.model, meta).unwrap_err().code, "MISMATCH");
}
