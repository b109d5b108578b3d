//! HTTP inference service.
//!
//! | method | path           | body                                   |
//! |--------|----------------|----------------------------------------|
//! | POST   | `/api/caption` | `{"image": <base64 PNG>, "guide_word"?}` |
//! | POST   | `/api/darken`  | `{"image": <base64 PNG>, "factor"}`     |
//! | GET    | `/api/health`  |                                        |
//! | GET    | `/api/vocab`   |                                        |
//!
//! Bad input yields a 4xx status with `{"code", "message"}`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use log::info;
use nightcap_core::dataset::{decode_png, encode_png, png_to_model_input, rgb_to_tensor, scale_brightness, tensor_to_rgb};
use nightcap_core::inference::{caption_auto, caption_interactive};
use nightcap_core::model::CaptionModel;
use nightcap_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// One model, loaded at startup and shared read-only by every request.
pub struct AppState {
    pub model: CaptionModel,
    pub model_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRequest {
    pub image: String,
    #[serde(default, alias = "guide")]
    pub guide_word: Option<String>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CaptionResponse {
    pub caption: String,
    pub tokens: Vec<String>,
    pub grids: Vec<Vec<Vec<f64>>>,
    pub guide_used: Option<String>,
    pub degraded_guide: bool,
    pub model_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkenRequest {
    pub image: String,
    pub factor: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DarkenResponse {
    /// Base64 PNG at the input's resolution.
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Image { .. } => Self::bad_request("invalid_image", e.to_string()),
            CoreError::Parameter(_) => Self::bad_request("invalid_parameter", e.to_string()),
            CoreError::Dimension { .. } => Self::bad_request("invalid_image", e.to_string()),
            _ => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "internal",
                message: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("invalid_json", e.to_string()))
}

fn decode_base64(image: &str) -> Result<Vec<u8>, ApiError> {
    BASE64
        .decode(image.trim())
        .map_err(|e| ApiError::bad_request("invalid_base64", format!("image is not valid base64: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: e.to_string(),
    })?
}

async fn caption(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<CaptionResponse>, ApiError> {
    let req: CaptionRequest = parse_json(&body)?;
    let png = decode_base64(&req.image)?;
    let response = blocking(move || {
        let pixels = png_to_model_input(&png)?;
        let result = match req.guide_word.as_deref() {
            Some(g) => caption_interactive(&state.model, &pixels, g)?,
            None => caption_auto(&state.model, &pixels)?,
        };
        Ok(CaptionResponse {
            caption: result.caption,
            tokens: result.trace.tokens,
            grids: result.trace.grids,
            guide_used: result.trace.guide_word,
            degraded_guide: result.degraded_guide,
            model_id: state.model_id.clone(),
        })
    })
    .await?;
    Ok(Json(response))
}

async fn darken(body: Bytes) -> Result<Json<DarkenResponse>, ApiError> {
    let req: DarkenRequest = parse_json(&body)?;
    if !(req.factor > 0.0 && req.factor <= 1.0) {
        return Err(ApiError::bad_request(
            "invalid_factor",
            format!("factor must be in (0, 1], got {}", req.factor),
        ));
    }
    let png = decode_base64(&req.image)?;
    let out = blocking(move || {
        let rgb = decode_png(&png)?;
        let dark = scale_brightness(&rgb_to_tensor(&rgb), req.factor)?;
        Ok(encode_png(&tensor_to_rgb(&dark)))
    })
    .await?;
    Ok(Json(DarkenResponse {
        image: BASE64.encode(out),
    }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model_id": state.model_id }))
}

async fn vocab(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "words": state.model.vocab.corpus_words() }))
}

async fn not_found() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        code: "not_found",
        message: "no such endpoint".into(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/caption", post(caption))
        .route("/api/darken", post(darken))
        .route("/api/health", get(health))
        .route("/api/vocab", get(vocab))
        .fallback(not_found)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("serving model {} on http://{}", state.model_id, listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
