//! HTTP chat service: sessions with an optional image and fixed
//! conditioning, model replies with safety annotations.

mod http;
mod model;

pub use http::{router, serve, AppState, ChatResponse, Health, ImageEntry, SessionCreated, SessionView};
pub use model::{ChatModel, Conditioning, Defaults, GenerationStats, Reply, ServeOptions};

use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control_safety::SafetyError;
use crate::decode::DecodeError;
use crate::imagefeat::{FeatureError, ImageFeatures};
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("image `{0}` is not in the feature store")]
    ImageNotFound(String),
    #[error("no session `{0}`")]
    SessionNotFound(String),
    #[error("message is empty")]
    EmptyMessage,
    #[error("invalid conditioning: {0}")]
    InvalidConditioning(String),
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("server config: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error("internal: {0}")]
    Internal(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ServeError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServeError::ImageNotFound(_) => "IMAGE_NOT_FOUND",
            ServeError::SessionNotFound(_) => "SESSION_NOT_FOUND",
            ServeError::EmptyMessage => "EMPTY_MESSAGE",
            ServeError::InvalidConditioning(_) => "INVALID_CONDITIONING",
            ServeError::BadRequest(_) => "BAD_REQUEST",
            ServeError::NotFound(_) => "NOT_FOUND",
            ServeError::Decode(_) => "GENERATION_FAILED",
            _ => "INTERNAL",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Model,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// One conversation. The image and conditioning are fixed at creation;
/// the history only grows.
#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub image_id: Option<String>,
    pub image: Option<Arc<ImageFeatures>>,
    pub conditioning: Conditioning,
    pub history: Vec<Turn>,
    /// Unix seconds.
    pub created_at: u64,
}

impl Session {
    pub fn new(image_id: Option<String>, image: Option<Arc<ImageFeatures>>, conditioning: Conditioning) -> Self {
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            image_id,
            image,
            conditioning,
            history: Vec::new(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn push(&mut self, speaker: Speaker, text: &str) {
        self.history.push(Turn {
            speaker,
            text: text.to_string(),
        });
    }
}
