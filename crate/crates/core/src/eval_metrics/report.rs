use serde::{Deserialize, Serialize};

use super::{bleu4, f1, rouge_l, EvalError};

/// Split name for Image-Chat episodes with no prior dialogue.
pub const FIRST_TURN: &str = "image_chat_first_turn";
/// Datasets averaged into the text-only column.
pub const TEXT_DATASETS: [&str; 4] = ["convai2", "ed", "wow", "bst"];
/// Column order of the ablation table; other datasets follow alphabetically.
const COLUMN_ORDER: [&str; 8] = ["convai2", "ed", "wow", "bst", FIRST_TURN, "image_chat", "coco", "reddit"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ppl,
    F1,
    Bleu4,
    RougeL,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ppl, Metric::F1, Metric::Bleu4, Metric::RougeL];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ppl => "ppl",
            Metric::F1 => "f1",
            Metric::Bleu4 => "bleu4",
            Metric::RougeL => "rouge_l",
        }
    }
}

/// Mean sentence-level scores over generated responses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub f1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub count: usize,
}

pub fn generation_scores<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
) -> Result<GenerationScores, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Mismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    let n = hyps.len();
    let mut s = GenerationScores {
        f1: 0.0,
        bleu4: 0.0,
        rouge_l: 0.0,
        count: n,
    };
    for (h, r) in hyps.iter().zip(refs) {
        s.f1 += f1(h.as_ref(), r.as_ref());
        s.bleu4 += bleu4(h.as_ref(), r.as_ref());
        s.rouge_l += rouge_l(h.as_ref(), r.as_ref());
    }
    if n > 0 {
        s.f1 /= n as f64;
        s.bleu4 /= n as f64;
        s.rouge_l /= n as f64;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub dataset: String,
    pub ppl: f64,
    pub nll: f64,
    pub target_tokens: usize,
    pub examples: usize,
    pub generation: Option<GenerationScores>,
}

impl DatasetScores {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Ppl => Some(self.ppl),
            Metric::F1 => self.generation.map(|g| g.f1),
            Metric::Bleu4 => self.generation.map(|g| g.bleu4),
            Metric::RougeL => self.generation.map(|g| g.rouge_l),
        }
    }
}

/// Row labels of the ablation table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportKeys {
    pub features: String,
    pub data: String,
    pub fusion: String,
}

/// One configuration's per-dataset scores. `failure` is set when the
/// configuration could not be trained or evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub keys: ReportKeys,
    pub datasets: Vec<DatasetScores>,
    pub failure: Option<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn column_rank(name: &str) -> (usize, String) {
    let pos = COLUMN_ORDER.iter().position(|c| *c == name).unwrap_or(COLUMN_ORDER.len());
    (pos, name.to_string())
}

impl EvalReport {
    pub fn failed(keys: ReportKeys, reason: impl Into<String>) -> Self {
        Self {
            keys,
            datasets: Vec::new(),
            failure: Some(reason.into()),
        }
    }

    pub fn get(&self, dataset: &str) -> Option<&DatasetScores> {
        self.datasets.iter().find(|d| d.dataset == dataset)
    }

    /// Mean over the text-only dialogue datasets that are present.
    pub fn text_avg(&self, m: Metric) -> Option<f64> {
        mean(
            self.datasets
                .iter()
                .filter(|d| TEXT_DATASETS.contains(&d.dataset.as_str()))
                .filter_map(|d| d.metric(m)),
        )
    }

    /// Mean over every dataset except the first-turn split, which is a
    /// subset of Image-Chat.
    pub fn all_avg(&self, m: Metric) -> Option<f64> {
        mean(
            self.datasets
                .iter()
                .filter(|d| d.dataset != FIRST_TURN)
                .filter_map(|d| d.metric(m)),
        )
    }

    /// Table with one row per report: grouping keys, one column per dataset,
    /// text and overall averages, and a status column.
    pub fn to_tsv(reports: &[EvalReport], m: Metric) -> String {
        let mut cols: Vec<String> = reports
            .iter()
            .flat_map(|r| r.datasets.iter().map(|d| d.dataset.clone()))
            .collect();
        cols.sort_by_key(|c| column_rank(c));
        cols.dedup();
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!("# metric: {}\nfeatures\tdata\tfusion", m.name());
        for c in &cols {
            out.push('\t');
            out.push_str(c);
        }
        out.push_str("\ttext_avg\tall_avg\tstatus\n");
        for r in reports {
            out.push_str(&format!("{}\t{}\t{}", r.keys.features, r.keys.data, r.keys.fusion));
            for c in &cols {
                out.push('\t');
                out.push_str(&fmt(r.get(c).and_then(|d| d.metric(m))));
            }
            let status = match &r.failure {
                Some(f) => format!("FAILED: {}", f.replace(['\t', '\n'], " ")),
                None => "ok".to_string(),
            };
            out.push_str(&format!("\t{}\t{}\t{status}\n", fmt(r.text_avg(m)), fmt(r.all_avg(m))));
        }
        out
    }
}
