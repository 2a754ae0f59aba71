//! Perplexity, F1, BLEU-4, ROUGE-L and the ablation report.

mod harness;
mod perplexity;
mod report;
mod text;

pub use harness::{ablation_harness, evaluate_sets, AblationCell, AblationGrid, AblationSetup, DataMix, NamedEpisodes};
pub use perplexity::{corpus_nll, perplexity, perplexity_from_nll, NllTotal};
pub use report::{generation_scores, DatasetScores, EvalReport, GenerationScores, Metric, ReportKeys};
pub use text::{bleu4, f1, normalize, rouge_l, BLEU_EPSILON, NORMALIZER_VERSION, ROUGE_BETA};

use thiserror::Error;

use crate::decode::DecodeError;
use crate::model::ModelError;
use crate::textdata::TextDataError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("perplexity over zero target tokens")]
    ZeroTokens,
    #[error("hypotheses ({hyps}) and references ({refs}) differ in count")]
    Mismatch { hyps: usize, refs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] TextDataError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
