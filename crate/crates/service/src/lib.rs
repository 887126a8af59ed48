//! HTTP inference service over an immutable, hot-swappable generator snapshot.
//!
//! Routes:
//! - `POST /v1/enhance` takes a JSON body (`image` as base64 PNG) or a
//!   multipart form (`image` file part) and answers `image/png`, with the
//!   request metadata in the `x-gsgn-metadata` header as JSON.
//! - `GET /v1/styles` lists `{index, name}` in checkpoint order.
//! - `GET /healthz` reports the model id and checkpoint hash, or 503.

use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use gsgn_core::checkpoint::Checkpoint;
use gsgn_core::data::{decode_png, encode_png, png_dimensions};
use gsgn_core::inference::{Enhancer, ResolvedStyle};
use gsgn_core::metrics;

pub const DEFAULT_MAX_EDGE: usize = 1024;
pub const METADATA_HEADER: &str = "x-gsgn-metadata";
const BODY_LIMIT: usize = 64 << 20;

/// Style in a request: a task name or one weight per task.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum StyleField {
    Name(String),
    Weights(Vec<f32>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhanceRequest {
    /// Base64 PNG.
    pub image: String,
    #[serde(default)]
    pub style: Option<StyleField>,
    #[serde(default)]
    pub return_metrics: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct StyleUsed {
    pub name: Option<String>,
    pub weights: Vec<f32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputMetrics {
    /// Fidelity of the output to the input.
    pub psnr_db: f64,
    /// Absent for images smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnhanceMetadata {
    pub model_id: String,
    pub checkpoint_hash: String,
    pub style: StyleUsed,
    pub width: usize,
    pub height: usize,
    pub inference_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<OutputMetrics>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StyleEntry {
    pub index: usize,
    pub name: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Health {
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// 64-bit content hash, 16 hex digits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_hash: Option<String>,
}

/// Shared state: the current snapshot behind a lock that is only held to
/// clone or replace the `Arc`.
#[derive(Debug)]
pub struct ServiceState {
    snapshot: RwLock<Option<Arc<Enhancer>>>,
    max_edge: usize,
    checkpoint_path: Option<PathBuf>,
}

impl ServiceState {
    pub fn new(max_edge: usize) -> Self {
        Self { snapshot: RwLock::new(None), max_edge, checkpoint_path: None }
    }

    /// State that loads, and later reloads, the checkpoint at `path`.
    pub fn from_path(path: &Path, max_edge: usize) -> gsgn_core::Result<Self> {
        let state = Self { snapshot: RwLock::new(None), max_edge, checkpoint_path: Some(path.to_path_buf()) };
        state.reload()?;
        Ok(state)
    }

    pub fn max_edge(&self) -> usize {
        self.max_edge
    }

    pub fn current(&self) -> Option<Arc<Enhancer>> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Atomically replaces the snapshot. Requests already holding the old
    /// one finish on it.
    pub fn install(&self, enhancer: Enhancer) -> Option<Arc<Enhancer>> {
        let mut slot = self.snapshot.write().unwrap_or_else(|e| e.into_inner());
        slot.replace(Arc::new(enhancer))
    }

    pub fn install_checkpoint(&self, ck: &Checkpoint) -> gsgn_core::Result<()> {
        self.install(Enhancer::from_checkpoint(ck)?);
        Ok(())
    }

    pub fn unload(&self) {
        self.snapshot.write().unwrap_or_else(|e| e.into_inner()).take();
    }

    /// Re-reads the configured checkpoint file. The previous snapshot stays
    /// in place when loading fails.
    pub fn reload(&self) -> gsgn_core::Result<()> {
        let path = self
            .checkpoint_path
            .as_ref()
            .ok_or_else(|| gsgn_core::Error::InvalidArgument("no checkpoint path configured".into()))?;
        self.install(Enhancer::load(path)?);
        Ok(())
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/enhance", post(enhance))
        .route("/v1/styles", get(styles))
        .route("/healthz", get(health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unavailable() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    match state.current() {
        Some(e) => Json(Health { status: "ok", model_id: Some(e.model_id()), checkpoint_hash: Some(format!("{:016x}", e.hash())) })
            .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "unavailable", model_id: None, checkpoint_hash: None }))
            .into_response(),
    }
}

async fn styles(State(state): State<Arc<ServiceState>>) -> Result<Json<Vec<StyleEntry>>, ApiError> {
    let e = state.current().ok_or_else(ApiError::unavailable)?;
    Ok(Json(e.tasks().iter().enumerate().map(|(index, name)| StyleEntry { index, name: name.clone() }).collect()))
}

struct Parsed {
    png: Vec<u8>,
    style: Option<StyleField>,
    return_metrics: bool,
}

async fn parse_request(req: Request) -> Result<Parsed, ApiError> {
    let content_type = req.headers().get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &()).await.map_err(|e| ApiError::bad(e.body_text()))?;
        let mut parsed = Parsed { png: Vec::new(), style: None, return_metrics: false };
        let mut have_image = false;
        while let Some(field) = form.next_field().await.map_err(|e| multipart_error(e.status(), e.body_text()))? {
            let name = field.name().unwrap_or("").to_string();
            let data = field.bytes().await.map_err(|e| multipart_error(e.status(), e.body_text()))?;
            match name.as_str() {
                "image" => {
                    parsed.png = data.to_vec();
                    have_image = true;
                }
                "style" => parsed.style = Some(style_from_text(&data)?),
                "return_metrics" => {
                    parsed.return_metrics = match std::str::from_utf8(&data).map(str::trim) {
                        Ok("true" | "1") => true,
                        Ok("false" | "0" | "") => false,
                        _ => return Err(ApiError::bad("return_metrics must be true or false")),
                    }
                }
                other => return Err(ApiError::bad(format!("unknown form field {other:?}"))),
            }
        }
        if !have_image {
            return Err(ApiError::bad("missing image part"));
        }
        Ok(parsed)
    } else if content_type.starts_with("application/json") {
        let bytes = Bytes::from_request(req, &()).await.map_err(|e| multipart_error(e.status(), e.body_text()))?;
        let body: EnhanceRequest = serde_json::from_slice(&bytes).map_err(|e| ApiError::bad(format!("invalid request body: {e}")))?;
        let png = base64::engine::general_purpose::STANDARD
            .decode(body.image.trim())
            .map_err(|e| ApiError::bad(format!("image is not valid base64: {e}")))?;
        Ok(Parsed { png, style: body.style, return_metrics: body.return_metrics })
    } else {
        Err(ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "expected application/json or multipart/form-data"))
    }
}

fn multipart_error(status: StatusCode, text: String) -> ApiError {
    if status == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(status, text)
    } else {
        ApiError::bad(text)
    }
}

/// Multipart style text: a task name, comma-separated weights or a JSON array.
fn style_from_text(data: &[u8]) -> Result<StyleField, ApiError> {
    let text = std::str::from_utf8(data).map_err(|_| ApiError::bad("style must be UTF-8"))?.trim();
    if text.starts_with('[') {
        return serde_json::from_str(text).map(StyleField::Weights).map_err(|e| ApiError::bad(format!("bad style weights: {e}")));
    }
    let weights: Result<Vec<f32>, _> = text.split(',').map(|s| s.trim().parse::<f32>()).collect();
    Ok(match weights {
        Ok(w) => StyleField::Weights(w),
        Err(_) => StyleField::Name(text.to_string()),
    })
}

fn resolve(e: &Enhancer, style: Option<StyleField>) -> Result<ResolvedStyle, ApiError> {
    let r = match style {
        None => e.default_style(),
        Some(StyleField::Name(n)) => e.style_by_name(&n),
        Some(StyleField::Weights(w)) => e.weights(w, true),
    };
    r.map_err(|err| ApiError::bad(err.to_string()))
}

async fn enhance(State(state): State<Arc<ServiceState>>, req: Request) -> Result<Response, ApiError> {
    // the snapshot is pinned before the body is read
    let snapshot = state.current().ok_or_else(ApiError::unavailable)?;
    let parsed = parse_request(req).await?;
    let (w, h) = png_dimensions(&parsed.png).map_err(|e| ApiError::bad(format!("undecodable image: {e}")))?;
    if w.max(h) > state.max_edge {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {w}x{h}; the longest side may be at most {}", state.max_edge),
        ));
    }
    let style = resolve(&snapshot, parsed.style)?;
    let return_metrics = parsed.return_metrics;
    let png = parsed.png;
    let job = tokio::task::spawn_blocking(move || run_enhance(&snapshot, &png, style, return_metrics));
    let (bytes, meta) = job.await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    let meta = serde_json::to_string(&meta).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    headers.insert(METADATA_HEADER, HeaderValue::from_str(&meta).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?);
    Ok((headers, bytes).into_response())
}

fn run_enhance(e: &Enhancer, png: &[u8], style: ResolvedStyle, return_metrics: bool) -> Result<(Vec<u8>, EnhanceMetadata), ApiError> {
    let x = decode_png(png).map_err(|err| ApiError::bad(format!("undecodable image: {err}")))?;
    let start = Instant::now();
    let y = e.enhance(&x, &style, None).map_err(|err| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()))?;
    let inference_ms = start.elapsed().as_secs_f64() * 1e3;
    let metrics = if return_metrics {
        let psnr_db = metrics::psnr(&y, &x, 1.0).map_err(|err| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()))?;
        Some(OutputMetrics { psnr_db, ssim: metrics::ssim(&y, &x).ok() })
    } else {
        None
    };
    let bytes = encode_png(&y).map_err(|err| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()))?;
    let meta = EnhanceMetadata {
        model_id: e.model_id(),
        checkpoint_hash: format!("{:016x}", e.hash()),
        style: StyleUsed { name: style.name, weights: style.style.z },
        width: x.shape()[2],
        height: x.shape()[1],
        inference_ms,
        metrics,
    };
    Ok((bytes, meta))
}
