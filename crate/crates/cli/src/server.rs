//! JSON-over-HTTP harmonization service.
//!
//! Images travel as base64 PNG strings. Every error is returned as
//! `{"error": <kind>, "detail": <message>}` with a 4xx or 503 status.

use std::sync::Arc;
use std::time::Instant;

use artopih::harmonizer::{HarmonizerModel, StyleMode};
use artopih::imagecore::{composite_paste, BBox, Image, Mask};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub const BODY_LIMIT: usize = 16 * 1024 * 1024;

/// A loaded model and the id of the checkpoint it came from.
pub struct LoadedModel {
    pub model: HarmonizerModel,
    pub checkpoint_id: String,
}

#[derive(Clone, Default)]
pub struct AppState {
    pub loaded: Option<Arc<LoadedModel>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: String,
}

impl ApiError {
    fn bad_request(kind: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind,
            detail: detail.into(),
        }
    }

    fn unavailable() -> Self {
        Self {
            status: StatusCode::SERVICE_UNAVAILABLE,
            kind: "model_not_loaded",
            detail: "no checkpoint is loaded; set CHECKPOINT or pass --ckpt".into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.kind, "detail": self.detail }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarmonizeRequest {
    pub background_png: String,
    pub object_png: String,
    pub object_mask_png: String,
    pub bbox: [usize; 4],
    pub mode: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarmonizeResponse {
    pub harmonized_png: String,
    pub composite_png: String,
    pub latency_ms: f64,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/model-info", get(model_info))
        .route("/api/harmonize", post(harmonize))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(match &state.loaded {
        Some(l) => json!({
            "status": "ok",
            "profile": l.model.config().profile.as_str(),
            "checkpoint_id": l.checkpoint_id,
        }),
        None => json!({ "status": "no_model", "profile": null, "checkpoint_id": null }),
    })
}

async fn model_info(State(state): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let l = state.loaded.as_ref().ok_or_else(ApiError::unavailable)?;
    let cfg = l.model.config();
    Ok(Json(json!({
        "profile": cfg.profile.as_str(),
        "widths": cfg.profile.widths(),
        "mapping": cfg.mapping.to_string(),
        "use_object_feature": cfg.use_object_feature,
        "trainable_parameters": l.model.trainable_parameters(),
        "encoder_parameters": l.model.encoder().num_parameters(),
        "modes": ["ours", "bg"],
        "checkpoint_id": l.checkpoint_id,
    })))
}

fn decode_field(field: &'static str, b64: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(b64.trim())
        .map_err(|e| ApiError::bad_request("invalid_base64", format!("{field}: {e}")))
}

fn parse_mode(mode: &str) -> Result<StyleMode, ApiError> {
    match mode {
        "ours" => Ok(StyleMode::Ours),
        "bg" => Ok(StyleMode::Bg),
        other => Err(ApiError::bad_request(
            "invalid_mode",
            format!("mode: expected \"ours\" or \"bg\", got {other:?}"),
        )),
    }
}

/// Decodes, composites and validates a request into model inputs.
pub fn prepare(req: &HarmonizeRequest) -> Result<(Image, Mask, StyleMode), ApiError> {
    let mode = parse_mode(&req.mode)?;
    let bg = Image::decode_png(&decode_field("background_png", &req.background_png)?)
        .map_err(|e| ApiError::bad_request("invalid_image", format!("background_png: {e}")))?;
    let obj = Image::decode_png(&decode_field("object_png", &req.object_png)?)
        .map_err(|e| ApiError::bad_request("invalid_image", format!("object_png: {e}")))?;
    let obj_mask = Mask::decode_png(&decode_field("object_mask_png", &req.object_mask_png)?)
        .map_err(|e| ApiError::bad_request("invalid_image", format!("object_mask_png: {e}")))?;
    if bg.height() % 8 != 0 || bg.width() % 8 != 0 {
        return Err(ApiError::bad_request(
            "invalid_image",
            format!(
                "background_png: {}x{} is not a multiple of 8 on each side",
                bg.height(),
                bg.width()
            ),
        ));
    }
    let [x0, y0, x1, y1] = req.bbox;
    let bbox = BBox::new(x0, y0, x1, y1);
    bbox.validate_for(bg.height(), bg.width())
        .map_err(|e| ApiError::bad_request("invalid_bbox", format!("bbox: {e}")))?;
    let (composite, mask) = composite_paste(&bg, &obj, &obj_mask, bbox)
        .map_err(|e| ApiError::bad_request("invalid_request", e.to_string()))?;
    Ok((composite, mask, mode))
}

async fn harmonize(
    State(state): State<AppState>,
    body: Result<Json<HarmonizeRequest>, JsonRejection>,
) -> Result<Json<HarmonizeResponse>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError {
        status: if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            StatusCode::PAYLOAD_TOO_LARGE
        } else {
            StatusCode::BAD_REQUEST
        },
        kind: "invalid_body",
        detail: e.body_text(),
    })?;
    let loaded = state.loaded.clone().ok_or_else(ApiError::unavailable)?;
    let (composite, mask, mode) = prepare(&req)?;
    let result = tokio::task::spawn_blocking(move || -> Result<HarmonizeResponse, String> {
        let start = Instant::now();
        let out = loaded
            .model
            .harmonize(&composite, &mask, &mode)
            .map_err(|e| e.to_string())?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(HarmonizeResponse {
            harmonized_png: B64.encode(out.encode_png().map_err(|e| e.to_string())?),
            composite_png: B64.encode(composite.encode_png().map_err(|e| e.to_string())?),
            latency_ms,
        })
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "internal",
        detail: e.to_string(),
    })?;
    result
        .map(Json)
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "harmonize_failed",
            detail: e,
        })
}

/// Serves `state` on `0.0.0.0:port` until interrupted.
pub async fn serve(state: AppState, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
