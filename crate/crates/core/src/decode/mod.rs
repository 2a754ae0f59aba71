//! Beam search with minimum length and n-gram blocking, plus an exhaustive
//! reference search over the same constraints.

mod beam;
mod ngram;
mod stepper;

pub use beam::{beam_search, exhaustive_oracle, BeamOutput, ORACLE_MAX_SEQUENCES};
pub use ngram::{find_banned_tokens, has_repeated_ngram, shares_ngram, NgramIndex};
pub use stepper::{generate, TransformerStepper};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::textdata::TextDataError;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid beam config: {0}")]
    Config(String),
    #[error("search space of {size} sequences exceeds the oracle bound {bound}")]
    SearchSpace { size: f64, bound: f64 },
    #[error("step model returned {got} rows of log-probs for {want} prefixes")]
    StepShape { got: usize, want: usize },
    #[error("no hypothesis could be extended")]
    NoCandidates,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] TextDataError),
}

fn default_beam_size() -> usize {
    10
}

fn default_min_length() -> usize {
    20
}

fn default_max_length() -> usize {
    128
}

fn default_block_ngram() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    #[serde(default = "default_beam_size")]
    pub beam_size: usize,
    /// Generated tokens required before `eos` may be emitted.
    #[serde(default = "default_min_length")]
    pub min_length: usize,
    /// Upper bound on generated tokens, counting `eos`.
    #[serde(default = "default_max_length")]
    pub max_length: usize,
    #[serde(default = "default_block_ngram")]
    pub block_ngram: usize,
    #[serde(default = "default_true")]
    pub block_within_generation: bool,
    #[serde(default = "default_true")]
    pub block_from_context: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: default_beam_size(),
            min_length: default_min_length(),
            max_length: default_max_length(),
            block_ngram: default_block_ngram(),
            block_within_generation: true,
            block_from_context: true,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam_size must be at least 1".into()));
        }
        if self.min_length >= self.max_length {
            return Err(DecodeError::Config(format!(
                "min_length {} must be below max_length {}",
                self.min_length, self.max_length
            )));
        }
        if self.block_ngram == 0 {
            return Err(DecodeError::Config("block_ngram must be at least 1".into()));
        }
        Ok(())
    }
}

/// A (possibly partial) generation. `tokens` ends with `eos` iff `finished`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Cumulative log-probability, including the `eos` step when finished.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without the trailing `eos`.
    pub fn content(&self) -> &[u32] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// An autoregressive scorer. Each call receives the live prefixes (generated
/// tokens only, no `bos`) and, for each, the index of the prefix it extends
/// in the previous call's list. The first call has the single empty prefix
/// with parent 0.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn eos_id(&self) -> u32;
    /// One row of `vocab_size` natural-log probabilities per prefix.
    fn next_log_probs(&mut self, prefixes: &[Vec<u32>], parents: &[usize]) -> Result<Vec<Vec<f64>>, DecodeError>;
}
