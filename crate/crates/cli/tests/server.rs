use std::sync::Arc;

use artopih::encoder::{Encoder, WidthProfile};
use artopih::harmonizer::{HarmonizerConfig, HarmonizerModel};
use artopih::imagecore::{Image, Mask};
use artopih_cli::server::{router, AppState, HarmonizeRequest, HarmonizeResponse, LoadedModel};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::{DType, Device};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn loaded() -> AppState {
    let enc = Arc::new(Encoder::random(WidthProfile::Tiny, 0, &Device::Cpu, DType::F32).unwrap());
    let model = HarmonizerModel::new(enc, HarmonizerConfig::default(), 3).unwrap();
    AppState {
        loaded: Some(Arc::new(LoadedModel {
            model,
            checkpoint_id: "test".into(),
        })),
    }
}

fn background() -> Image {
    Image::from_fn(48, 64, |c, y, x| ((c * 40 + y * 3 + x * 2) % 255) as f32 / 255.0).unwrap()
}

fn request(bbox: [usize; 4], mode: &str) -> HarmonizeRequest {
    let obj = Image::filled(10, 12, [0.9, 0.1, 0.1]).unwrap();
    HarmonizeRequest {
        background_png: B64.encode(background().encode_png().unwrap()),
        object_png: B64.encode(obj.encode_png().unwrap()),
        object_mask_png: B64.encode(Mask::ones(10, 12).unwrap().encode_png().unwrap()),
        bbox,
        mode: mode.into(),
    }
}

async fn call(state: AppState, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn post(body: &HarmonizeRequest) -> Request<Body> {
    Request::post("/api/harmonize")
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap()
}

#[tokio::test]
async fn health_reports_model_state() {
    let (s, v) = call(AppState::default(), Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "no_model");
    let (s, v) = call(loaded(), Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["profile"], "tiny");
}

#[tokio::test]
async fn model_info_lists_modes() {
    let (s, v) = call(loaded(), Request::get("/api/model-info").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["widths"], serde_json::json!([8, 16, 32, 64]));
    assert_eq!(v["modes"], serde_json::json!(["ours", "bg"]));
}

#[tokio::test]
async fn harmonize_without_model_is_503() {
    let (s, v) = call(AppState::default(), post(&request([8, 8, 24, 24], "ours"))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "model_not_loaded");
}

#[tokio::test]
async fn bad_bbox_names_the_field() {
    let (s, v) = call(loaded(), post(&request([30, 8, 20, 24], "ours"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_bbox");
    assert!(v["detail"].as_str().unwrap().starts_with("bbox"));
    let (s, _) = call(loaded(), post(&request([8, 8, 80, 24], "ours"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bad_mode_and_base64_are_rejected() {
    let (s, v) = call(loaded(), post(&request([8, 8, 24, 24], "ro"))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_mode");
    let mut r = request([8, 8, 24, 24], "bg");
    r.object_png = "%%%".into();
    let (s, v) = call(loaded(), post(&r)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["detail"].as_str().unwrap().starts_with("object_png"));
    let req = Request::post("/api/harmonize")
        .header("content-type", "application/json")
        .body(Body::from("{\"bbox\": 3}"))
        .unwrap();
    let (s, v) = call(loaded(), req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "invalid_body");
}

#[tokio::test]
async fn background_is_preserved_in_both_modes() {
    let bbox = [16, 8, 40, 32];
    for mode in ["ours", "bg"] {
        let (s, v) = call(loaded(), post(&request(bbox, mode))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let resp: HarmonizeResponse = serde_json::from_value(v).unwrap();
        assert!(resp.latency_ms >= 0.0);
        let out = Image::decode_png(&B64.decode(resp.harmonized_png).unwrap()).unwrap();
        let bg = background();
        assert_eq!((out.height(), out.width()), (48, 64));
        for y in 0..48 {
            for x in 0..64 {
                let inside = (16..40).contains(&x) && (8..32).contains(&y);
                if !inside {
                    for c in 0..3 {
                        assert!((out.get(c, y, x) - bg.get(c, y, x)).abs() <= 1.0 / 255.0 + 1e-6);
                    }
                }
            }
        }
    }
}
