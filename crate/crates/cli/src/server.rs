//! HTTP chat service. Handlers validate and decode requests, then hand them
//! to a single inference worker through a bounded queue.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medseg_core::codec::{decode_base64, png_dimensions, EncodedMask, MaskFormat, SpanRecord};
use medseg_core::metrics::Segmenter;
use medseg_core::model::Prediction;
use medseg_core::protocol::{parse_grounded, serialize_grounded, Role, Turn, TurnRecord};
use medseg_core::{Error as CoreError, ImageGrid};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_QUEUE_DEPTH: usize = 8;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;
/// Upper bound on request bodies; images themselves are bounded by the model.
const MAX_BODY_BYTES: usize = 4 << 20;

fn default_max_new_tokens() -> usize {
    DEFAULT_MAX_NEW_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatOptions {
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub mask_format: MaskFormat,
}

impl Default for ChatOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            mask_format: MaskFormat::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Base64 PNG, 8-bit grayscale.
    pub image: String,
    #[serde(default)]
    pub history: Vec<TurnRecord>,
    pub message: String,
    #[serde(default)]
    pub options: ChatOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub spans: Vec<SpanRecord>,
    pub model_version: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// What the handlers need to know about the loaded model without touching it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInfo {
    pub version: String,
    /// Largest accepted image side.
    pub image_size: usize,
    /// Image sides must be multiples of this.
    pub patch_size: usize,
}

struct Job {
    image: ImageGrid,
    history: Vec<Turn>,
    max_new_tokens: usize,
    reply: oneshot::Sender<Result<Prediction, CoreError>>,
}

struct Engine {
    info: ModelInfo,
    queue: mpsc::Sender<Job>,
}

#[derive(Clone)]
pub struct AppState {
    engine: Option<Arc<Engine>>,
}

impl AppState {
    /// A service that answers 503 until restarted with a model.
    pub fn unloaded() -> Self {
        Self { engine: None }
    }

    /// Moves `model` onto a dedicated worker thread. At most `queue_depth`
    /// requests wait behind the one being served; more are refused.
    pub fn with_model<M>(model: M, info: ModelInfo, queue_depth: usize) -> Self
    where
        M: Segmenter + Send + 'static,
    {
        let (tx, mut rx) = mpsc::channel::<Job>(queue_depth.max(1));
        std::thread::Builder::new()
            .name("inference".into())
            .spawn(move || {
                while let Some(job) = rx.blocking_recv() {
                    let out = model.predict(&job.image, &job.history, job.max_new_tokens);
                    // the client may have gone away
                    let _ = job.reply.send(out);
                }
            })
            .expect("spawn inference worker");
        Self {
            engine: Some(Arc::new(Engine { info, queue: tx })),
        }
    }

    pub fn model_info(&self) -> Option<&ModelInfo> {
        self.engine.as_deref().map(|e| &e.info)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("inference queue is full")]
    Busy,
    #[error("model not loaded")]
    NotLoaded,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Busy => StatusCode::TOO_MANY_REQUESTS,
            ApiError::NotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}

fn decode_image(b64: &str, info: &ModelInfo) -> Result<ImageGrid, ApiError> {
    let bytes = decode_base64(b64).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let (w, h) = png_dimensions(&bytes).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    if w > info.image_size || h > info.image_size {
        return Err(ApiError::TooLarge(format!(
            "image {h}x{w} exceeds the model's {}x{}",
            info.image_size, info.image_size
        )));
    }
    if w == 0 || h == 0 || w % info.patch_size != 0 || h % info.patch_size != 0 {
        return Err(ApiError::BadRequest(format!(
            "image {h}x{w} is not a multiple of the patch size {}",
            info.patch_size
        )));
    }
    medseg_core::codec::image_from_png_base64(b64, info.image_size * info.image_size)
        .map_err(|e| ApiError::BadRequest(e.to_string()))
}

/// History must alternate user/assistant starting with user and end on an
/// assistant turn; the new message closes it with a user turn.
fn build_history(history: &[TurnRecord], message: &str) -> Result<Vec<Turn>, ApiError> {
    let mut turns = Vec::with_capacity(history.len() + 1);
    for (i, rec) in history.iter().enumerate() {
        let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if rec.role != expected {
            return Err(ApiError::BadRequest(format!(
                "history turn {i}: expected {} turn",
                expected.as_str()
            )));
        }
        let turn = match rec.role {
            Role::User => {
                if rec.text.contains(medseg_core::protocol::SEG) {
                    return Err(ApiError::BadRequest(format!("history turn {i}: user turn contains [SEG]")));
                }
                Turn::user(rec.text.clone())
            }
            Role::Assistant => Turn::assistant(
                parse_grounded(&rec.text).map_err(|e| ApiError::BadRequest(format!("history turn {i}: {e}")))?,
            ),
        };
        turns.push(turn);
    }
    if !history.len().is_multiple_of(2) {
        return Err(ApiError::BadRequest("history must end with an assistant turn".into()));
    }
    if message.contains(medseg_core::protocol::SEG) {
        return Err(ApiError::BadRequest("message contains [SEG]".into()));
    }
    turns.push(Turn::user(message));
    Ok(turns)
}

fn respond(pred: &Prediction, format: MaskFormat, version: &str, started: Instant) -> Result<ChatResponse, ApiError> {
    let spans = pred
        .text
        .spans()
        .zip(&pred.masks)
        .map(|(span, mask)| {
            Ok(SpanRecord {
                slot_index: span.slot_index,
                phrase: span.phrase.clone(),
                mask: EncodedMask::encode(mask, format).map_err(|e| ApiError::Internal(e.to_string()))?,
                area_px: mask.area(),
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    if spans.len() != pred.text.slot_count() {
        return Err(ApiError::Internal("slot and mask counts differ".into()));
    }
    Ok(ChatResponse {
        text: serialize_grounded(&pred.text),
        spans,
        model_version: version.to_string(),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

async fn chat(State(state): State<AppState>, body: Bytes) -> Result<Json<ChatResponse>, ApiError> {
    let started = Instant::now();
    let engine = state.engine.as_deref().ok_or(ApiError::NotLoaded)?;
    let req: ChatRequest = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let image = decode_image(&req.image, &engine.info)?;
    let history = build_history(&req.history, &req.message)?;
    let (reply, rx) = oneshot::channel();
    let job = Job {
        image,
        history,
        max_new_tokens: req.options.max_new_tokens,
        reply,
    };
    engine.queue.try_send(job).map_err(|e| match e {
        mpsc::error::TrySendError::Full(_) => ApiError::Busy,
        mpsc::error::TrySendError::Closed(_) => ApiError::NotLoaded,
    })?;
    let pred = rx.await.map_err(|_| ApiError::Internal("inference worker stopped".into()))?;
    let pred = pred.map_err(|e| match e {
        CoreError::GenerationBudgetExceeded(_) | CoreError::SequenceTooLong { .. } => {
            ApiError::Unprocessable(e.to_string())
        }
        CoreError::Shape(_) | CoreError::InvalidArgument(_) => ApiError::BadRequest(e.to_string()),
        other => ApiError::Internal(other.to_string()),
    })?;
    respond(&pred, req.options.mask_format, &engine.info.version, started).map(Json)
}

async fn healthz(State(state): State<AppState>) -> (StatusCode, Json<Health>) {
    match state.model_info() {
        Some(info) => (
            StatusCode::OK,
            Json(Health {
                status: "ok".into(),
                model_version: Some(info.version.clone()),
            }),
        ),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(Health {
                status: "unavailable".into(),
                model_version: None,
            }),
        ),
    }
}

/// `cors_origin` of `None` or `"*"` allows any origin.
pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin {
        None | Some("*") => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).unwrap_or(HeaderValue::from_static("null"))),
    };
    let cors = CorsLayer::new().allow_origin(origin).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(cors)
        .with_state(state)
}

/// Binds `addr` and serves on a background thread with its own runtime;
/// returns the bound address. Used by tests and embedding callers.
pub fn spawn_background(addr: SocketAddr, state: AppState, cors_origin: Option<String>) -> std::io::Result<SocketAddr> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    std::thread::Builder::new().name("http".into()).spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("tokio listener");
            if let Err(e) = axum::serve(listener, router(state, cors_origin.as_deref())).await {
                log::error!("server stopped: {e}");
            }
        })
    })?;
    Ok(local)
}

/// Serves until the process is interrupted.
pub async fn serve(addr: SocketAddr, state: AppState, cors_origin: Option<String>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, cors_origin.as_deref()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
