use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use super::{ChatModel, Conditioning, Reply, ServeError, Session, Turn};

/// Shared server state: the model plus the session table. Each session has
/// its own lock, so one session runs one generation at a time while
/// different sessions proceed concurrently.
pub struct AppState {
    pub model: Arc<ChatModel>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    thumbnails: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: ChatModel, thumbnails: Option<PathBuf>) -> Self {
        Self {
            model: Arc::new(model),
            sessions: RwLock::new(HashMap::new()),
            thumbnails,
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServeError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServeError::SessionNotFound(id.to_string()))
    }

    fn thumbnail_file(&self, image_id: &str) -> Option<String> {
        let dir = self.thumbnails.as_ref()?;
        ["jpg", "jpeg", "png", "webp"]
            .iter()
            .map(|ext| format!("{image_id}.{ext}"))
            .find(|name| dir.join(name).is_file())
    }
}

#[derive(Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServeError::ImageNotFound(_) | ServeError::SessionNotFound(_) | ServeError::NotFound(_) => {
                StatusCode::NOT_FOUND
            }
            ServeError::EmptyMessage | ServeError::InvalidConditioning(_) | ServeError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            code: self.code(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServeError> {
    let slice: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(slice).map_err(|e| ServeError::BadRequest(e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    conditioning: Option<Conditioning>,
}

#[derive(Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub image_id: Option<String>,
    /// The model's first turn when the session has an image.
    pub opening: Option<Reply>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChatRequest {
    session_id: String,
    message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    /// Number of turns in the session after this reply.
    pub turns: usize,
    #[serde(flatten)]
    pub reply: Reply,
}

#[derive(Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub thumbnail_url: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub image_id: Option<String>,
    pub conditioning: Conditioning,
    pub history: Vec<Turn>,
    pub created_at: u64,
}

async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServeError> + Send + 'static,
) -> Result<T, ServeError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServeError::Internal(format!("generation task failed: {e}")))?
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionCreated>, ServeError> {
    let req: NewSession = parse(&body)?;
    let conditioning = req.conditioning.unwrap_or_default();
    app.model.check_conditioning(&conditioning)?;
    let image = match &req.image_id {
        Some(id) => Some(app.model.load_image(id)?),
        None => None,
    };
    let mut session = Session::new(req.image_id.clone(), image, conditioning);
    let opening = if session.image_id.is_some() {
        let model = app.model.clone();
        let (s, reply) = run_blocking(move || {
            let reply = model.advance(&mut session, None)?;
            Ok((session, reply))
        })
        .await?;
        session = s;
        Some(reply)
    } else {
        None
    };
    let session_id = session.id.clone();
    tracing::info!(session = %session_id, image = ?req.image_id, "session created");
    app.sessions
        .write()
        .expect("session table lock")
        .insert(session_id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(SessionCreated {
        session_id,
        image_id: req.image_id,
        opening,
    }))
}

async fn chat(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<ChatResponse>, ServeError> {
    let req: ChatRequest = parse(&body)?;
    if req.message.trim().is_empty() {
        return Err(ServeError::EmptyMessage);
    }
    let handle = app.session(&req.session_id)?;
    let mut guard = handle.lock_owned().await;
    let model = app.model.clone();
    let message = req.message;
    let (guard, reply) = run_blocking(move || {
        let reply = model.advance(&mut guard, Some(&message))?;
        Ok((guard, reply))
    })
    .await?;
    Ok(Json(ChatResponse {
        session_id: req.session_id,
        turns: guard.history.len(),
        reply,
    }))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ServeError> {
    let handle = app.session(&id)?;
    let s = handle.lock().await;
    Ok(Json(SessionView {
        session_id: s.id.clone(),
        image_id: s.image_id.clone(),
        conditioning: s.conditioning.clone(),
        history: s.history.clone(),
        created_at: s.created_at,
    }))
}

async fn images(State(app): State<Arc<AppState>>) -> Json<Vec<ImageEntry>> {
    Json(
        app.model
            .image_ids()
            .iter()
            .map(|id| ImageEntry {
                id: id.clone(),
                thumbnail_url: app.thumbnail_file(id).map(|f| format!("/thumbnails/{f}")),
            })
            .collect(),
    )
}

async fn thumbnail(State(app): State<Arc<AppState>>, Path(name): Path<String>) -> Result<Response, ServeError> {
    let dir = app.thumbnails.as_ref().ok_or_else(|| ServeError::NotFound(name.clone()))?;
    let safe = !name.is_empty() && !name.starts_with('.') && !name.contains(['/', '\\']);
    if !safe {
        return Err(ServeError::NotFound(name));
    }
    let bytes = tokio::fs::read(dir.join(&name))
        .await
        .map_err(|_| ServeError::NotFound(name.clone()))?;
    let mime = match name.rsplit('.').next() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
    pub images: usize,
    pub fusion: String,
    pub feature_kind: String,
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    let cfg = &app.model.params.config;
    Json(Health {
        status: "ok".into(),
        sessions: app.sessions.read().expect("session table lock").len(),
        images: app.model.image_ids().len(),
        fusion: cfg.fusion.to_string(),
        feature_kind: cfg.feature_kind.to_string(),
    })
}

async fn fallback() -> ServeError {
    ServeError::NotFound("route".into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session))
        .route("/chat", post(chat))
        .route("/images", get(images))
        .route("/thumbnails/{name}", get(thumbnail))
        .route("/health", get(health))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
