//! Tokenization, episode files, context assembly, batching and the
//! multi-task sampler.

mod batch;
mod bpe;
mod context;
mod episode;
mod sampler;

pub use batch::{make_batch, Batch, Example, ImageBatch};
pub use bpe::{bpe_train, Vocab, BOS_ID, EOS_ID, NUM_RESERVED, PAD_ID, SPECIAL_TOKENS, UNK_ID};
pub use context::{assemble_context, ControlSettings, PERSONA_PREFIX, STYLE_PREFIX};
pub use episode::{load_episodes, read_episodes, write_episodes, DatasetRole, Episode};
pub use sampler::{DatasetSpec, MultitaskSampler};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TextDataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("episode file line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch: {0}")]
    Batch(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for TextDataError {
    fn from(e: std::io::Error) -> Self {
        TextDataError::Io(e.to_string())
    }
}
