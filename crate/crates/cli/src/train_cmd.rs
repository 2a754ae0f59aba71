use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use mmb_core::imagefeat::FeatureKind;
use mmb_core::model::Fusion;
use mmb_core::train::{staged_pipeline, train, Stage, TrainConfig, TrainRun};
use serde_json::json;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (JSON). Relative paths inside it resolve against its
    /// directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Adapt-pretrain config to run first; its checkpoint initializes this
    /// stage.
    #[arg(long)]
    pub adapt_config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Non-improving evaluations before stopping; 0 disables early stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Stop once validation perplexity reaches this value.
    #[arg(long)]
    pub target_ppl: Option<f64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Training log (JSONL); defaults to `<output>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub feature_kind: Option<FeatureKind>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// BPE vocabulary size when no vocabulary file is given.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Append gender control tokens derived from each label.
    #[arg(long)]
    pub degender: bool,
    /// Probability of replacing a style with its polarity bucket.
    #[arg(long)]
    pub bucket_p_replace: Option<f64>,
    /// Train without image features.
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub include_knowledge: bool,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(seed, lr, warmup_steps, max_steps, eval_interval, patience, batch_size, max_len, output);
        if self.target_ppl.is_some() {
            cfg.target_ppl = self.target_ppl;
        }
        if self.log.is_some() {
            cfg.log = self.log.clone();
        }
        if self.init_checkpoint.is_some() {
            cfg.init_checkpoint = self.init_checkpoint.clone();
        }
        if self.features.is_some() {
            cfg.features = self.features.clone();
        }
        if self.fusion.is_some() {
            cfg.model.fusion = self.fusion;
        }
        if self.feature_kind.is_some() {
            cfg.model.feature_kind = self.feature_kind;
        }
        if self.dropout.is_some() {
            cfg.model.dropout = self.dropout;
        }
        if let Some(v) = self.vocab_size {
            cfg.vocab.size = v;
        }
        if let Some(p) = self.bucket_p_replace {
            cfg.controls.bucket_p_replace = p;
        }
        cfg.controls.degender |= self.degender;
        cfg.controls.no_image |= self.no_image;
        cfg.controls.include_knowledge |= self.include_knowledge;
    }
}

fn load(path: &Path, stage: Stage) -> anyhow::Result<TrainConfig> {
    let cfg = TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if cfg.stage != stage {
        bail!("{} declares stage {}, expected {}", path.display(), cfg.stage.name(), stage.name());
    }
    Ok(cfg)
}

fn summary(run: &TrainRun) -> serde_json::Value {
    json!({
        "checkpoint": run.checkpoint,
        "log": run.log_path,
        "steps": run.outcome.steps,
        "stop": run.outcome.stop,
        "best_step": run.outcome.best_step,
        "best_val_ppl": run.outcome.best_val_ppl,
        "provenance": run.header.provenance,
    })
}

pub fn run(args: &TrainArgs, stage: Stage) -> anyhow::Result<()> {
    let mut cfg = load(&args.config, stage)?;
    args.apply(&mut cfg);
    let result = match &args.adapt_config {
        Some(adapt) => {
            if stage != Stage::Finetune {
                bail!("--adapt-config only applies to `train`");
            }
            let adapt = load(adapt, Stage::AdaptPretrain)?;
            let (first, second) = staged_pipeline(&adapt, &cfg)?;
            json!({"adapt_pretrain": summary(&first), "finetune": summary(&second)})
        }
        None => summary(&train(&cfg)?),
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
