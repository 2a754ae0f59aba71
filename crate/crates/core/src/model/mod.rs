//! Encoder-decoder transformer with optional image fusion.

mod check;
mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    load_checkpoint, params_sha256, read_checkpoint_header, save_checkpoint, Checkpoint, CheckpointHeader, ManifestEntry,
    StageRecord, CHECKPOINT_MAGIC,
};
pub use check::grad_check_model;
pub use config::{Fusion, ModelConfig};
pub use forward::{
    decode, decode_step, encode, encode_tensor, forward_loss, DecoderState, Dropout, EncoderInput, Encoded,
};
pub use params::{param_manifest, ModelParams, ParamId};

use thiserror::Error;

use crate::imagefeat::FeatureKind;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model expects {expected} features, got {actual}")]
    KindMismatch { expected: FeatureKind, actual: FeatureKind },
    #[error("image features required for `{0}` but none were provided")]
    MissingFeatures(String),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
