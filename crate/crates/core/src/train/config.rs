use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ControlsConfig, TrainError, TrainOptions};
use crate::imagefeat::FeatureKind;
use crate::model::{Fusion, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    AdaptPretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::AdaptPretrain => "adapt_pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

fn one() -> f64 {
    1.0
}

/// One dataset of the training mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Training episodes (JSONL).
    pub train: PathBuf,
    /// Held-out episodes for validation perplexity.
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default = "one")]
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Reference,
}

/// A preset with optional overrides, or a complete custom config. The
/// vocabulary size always comes from the vocabulary in use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelChoice {
    pub preset: Preset,
    pub fusion: Option<Fusion>,
    pub feature_kind: Option<FeatureKind>,
    pub dropout: Option<f64>,
    pub custom: Option<ModelConfig>,
}

impl ModelChoice {
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = match (&self.custom, self.preset) {
            (Some(c), _) => c.clone(),
            (None, Preset::Desk) => ModelConfig::desk(vocab_size),
            (None, Preset::Reference) => ModelConfig::reference(vocab_size),
        };
        cfg.vocab_size = vocab_size;
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(k) = self.feature_kind {
            cfg.feature_kind = k;
        }
        if let Some(d) = self.dropout {
            cfg.dropout = d;
        }
        cfg
    }
}

fn default_vocab_size() -> usize {
    2000
}

/// Where the vocabulary comes from when no init checkpoint supplies one:
/// a JSON file, or BPE trained on the training episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub size: usize,
}

impl Default for VocabSource {
    fn default() -> Self {
        Self {
            path: None,
            size: default_vocab_size(),
        }
    }
}

fn default_lr() -> f64 {
    1e-5
}
fn default_warmup() -> u64 {
    100
}
fn default_max_steps() -> usize {
    2000
}
fn default_eval_interval() -> usize {
    100
}
fn default_patience() -> usize {
    3
}
fn default_batch_size() -> usize {
    16
}
fn default_max_len() -> usize {
    128
}

/// One training stage, as read from a JSON file. `seed` has no default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub datasets: Vec<DatasetConfig>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub target_ppl: Option<f64>,
    #[serde(default)]
    pub model: ModelChoice,
    #[serde(default)]
    pub vocab: VocabSource,
    /// Feature file for image episodes.
    #[serde(default)]
    pub features: Option<PathBuf>,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub controls: ControlsConfig,
    /// Checkpoint written at the end of the stage.
    pub output: PathBuf,
    /// JSONL training log; defaults to the output path with `.log.jsonl`.
    #[serde(default)]
    pub log: Option<PathBuf>,
}

impl TrainConfig {
    /// Reads a config; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: TrainConfig = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            fix(&mut d.train);
            if let Some(v) = &mut d.valid {
                fix(v);
            }
        }
        for p in [
            self.vocab.path.as_mut(),
            self.features.as_mut(),
            self.init_checkpoint.as_mut(),
            self.log.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output);
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.datasets.is_empty() {
            return Err(TrainError::Config("no datasets".into()));
        }
        self.controls.validate()?;
        self.options().validate()
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            max_steps: self.max_steps,
            eval_interval: self.eval_interval,
            patience: self.patience,
            seed: self.seed,
            batch_size: self.batch_size,
            max_len: self.max_len,
            target_ppl: self.target_ppl,
        }
    }

    pub fn log_path(&self) -> PathBuf {
        self.log.clone().unwrap_or_else(|| {
            let mut s = self.output.clone().into_os_string();
            s.push(".log.jsonl");
            PathBuf::from(s)
        })
    }
}
