//! Style conditioning, gender control tokens, blocklist matching, an
//! offensive-language classifier and toxicity reporting.

mod blocklist;
mod classifier;
mod gender;
mod report;
mod styles;

pub use blocklist::{Blocklist, BLOCKLIST_SHA256};
pub use classifier::{train_offensive_classifier, ClassifierTraining, OffensiveClassifier};
pub use gender::{classify_gender, GenderFlags, GenderLexicon, GENDER_LEXICON_SHA256};
pub use report::{
    gender_rates, gender_rates_tsv, percent, polarity_split, toxicity_report, GenderRateRow, Split, ToxicityCell,
    SplitKey, ToxicityReport, ToxicityRow,
};
pub use styles::{Bucket, StyleRegistry, STYLES_SHA256, STYLE_COUNT};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("unknown style `{0}`")]
    UnknownStyle(String),
    #[error("{file} line {line}: {detail}")]
    Parse {
        file: &'static str,
        line: usize,
        detail: String,
    },
    #[error("style registry has {0} entries, expected 215")]
    StyleCount(usize),
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("classifier training needs both classes; got {positives} offensive and {negatives} safe examples")]
    SingleClass { positives: usize, negatives: usize },
    #[error("no episodes to evaluate")]
    EmptyEpisodes,
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Lowercased maximal alphanumeric runs; everything else separates words.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A yes/no offensiveness judgement behind a common interface.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn is_offensive(&self, text: &str) -> bool;
}

/// Safety annotations for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub blocklist_hits: Vec<String>,
    pub offensive_by_blocklist: bool,
    pub classifier_score: Option<f64>,
    pub offensive_by_classifier: Option<bool>,
    pub female_present: bool,
    pub male_present: bool,
}

pub fn assess(
    text: &str,
    blocklist: &Blocklist,
    classifier: Option<&OffensiveClassifier>,
    lexicon: &GenderLexicon,
) -> SafetyVerdict {
    let hits = blocklist.matches(text);
    let score = classifier.map(|c| c.score(text));
    let flags = classify_gender(text, lexicon);
    SafetyVerdict {
        offensive_by_blocklist: !hits.is_empty(),
        blocklist_hits: hits,
        classifier_score: score,
        offensive_by_classifier: classifier.zip(score).map(|(c, s)| s >= c.threshold),
        female_present: flags.female,
        male_present: flags.male,
    }
}
