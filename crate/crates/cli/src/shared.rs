use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use mmb_core::decode::BeamConfig;
use mmb_core::imagefeat::ImageBank;
use mmb_core::model::{load_checkpoint, Checkpoint, Fusion};
use mmb_core::textdata::{load_episodes, Episode};
use mmb_core::train::load_image_bank;
use serde::Deserialize;

use crate::layered::layered;

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamArgs {
    /// Beam width.
    #[arg(long)]
    pub beam_size: Option<usize>,
    /// Tokens required before end-of-sequence may be emitted.
    #[arg(long)]
    pub min_length: Option<usize>,
    /// Maximum generated tokens, counting end-of-sequence.
    #[arg(long)]
    pub max_length: Option<usize>,
    /// Length of blocked repeated n-grams.
    #[arg(long)]
    pub block_ngram: Option<usize>,
    /// Allow n-grams that occur in the context.
    #[arg(long)]
    pub no_context_block: bool,
    /// Allow n-grams repeated within the generation.
    #[arg(long)]
    pub no_gen_block: bool,
}

layered!(BeamArgs {
    opt: [beam_size, min_length, max_length, block_ngram],
    flag: [no_context_block, no_gen_block],
    list: [],
    nested: []
});

impl BeamArgs {
    pub fn config(&self) -> anyhow::Result<BeamConfig> {
        let d = BeamConfig::default();
        let cfg = BeamConfig {
            beam_size: self.beam_size.unwrap_or(d.beam_size),
            min_length: self.min_length.unwrap_or(d.min_length),
            max_length: self.max_length.unwrap_or(d.max_length),
            block_ngram: self.block_ngram.unwrap_or(d.block_ngram),
            block_from_context: !self.no_context_block,
            block_within_generation: !self.no_gen_block,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn require<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    match value {
        Some(v) => Ok(v),
        None => bail!("--{flag} is required (on the command line or in the config file)"),
    }
}

pub fn checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    load_checkpoint(path, None).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn episodes(path: &Path) -> anyhow::Result<Vec<Episode>> {
    load_episodes(path).with_context(|| format!("loading episodes {}", path.display()))
}

/// The image bank for a fused model. Without `features`, episodes that
/// reference an image fail when their example is built.
pub fn images(ckpt: &Checkpoint, features: Option<&Path>, no_image: bool) -> anyhow::Result<Option<ImageBank>> {
    let cfg = &ckpt.params.config;
    if cfg.fusion == Fusion::None || no_image {
        return Ok(None);
    }
    let Some(path) = features else {
        return Ok(None);
    };
    let bank = load_image_bank(path).with_context(|| format!("loading features {}", path.display()))?;
    if bank.kind() != cfg.feature_kind {
        bail!("model expects {} features, {} holds {}", cfg.feature_kind, path.display(), bank.kind());
    }
    Ok(Some(bank))
}

/// Stdout or a file.
pub fn output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
        }
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}
