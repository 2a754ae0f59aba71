//! Staged training: example building, the optimization loop with early
//! stopping, file-driven stages with checkpoint provenance, and synthetic
//! corpora.

mod config;
mod examples;
mod run;
pub mod synth;
mod trainer;

pub use config::{DatasetConfig, ModelChoice, Preset, Stage, TrainConfig, VocabSource};
pub use examples::{ControlsConfig, ExampleContext};
pub use run::{load_image_bank, staged_pipeline, train, train_vocab, TrainRun};
pub use trainer::{mix_perplexity, train_loop, EvalPoint, LogRecord, StopReason, TrainOptions, TrainOutcome, TrainSet};

use std::path::PathBuf;

use thiserror::Error;

use crate::control_safety::SafetyError;
use crate::eval_metrics::EvalError;
use crate::imagefeat::FeatureError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::textdata::TextDataError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{dataset} episode references image `{image_id}` with no features available")]
    MissingFeatures { dataset: String, image_id: String },
    #[error("training diverged at step {step}; last good parameters saved to {}", last_good.display())]
    Diverged { step: usize, last_good: PathBuf },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] TextDataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Whether the error reports a NaN or infinity produced by the model.
    pub fn is_non_finite(&self) -> bool {
        let numerics = match self {
            TrainError::Numerics(e) | TrainError::Model(ModelError::Numerics(e)) => e,
            TrainError::Eval(EvalError::Model(ModelError::Numerics(e))) => e,
            _ => return false,
        };
        matches!(
            numerics,
            NumericsError::NonFinite { .. } | NumericsError::NonFiniteGradient { .. }
        )
    }
}
