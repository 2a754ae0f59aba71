use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use mmb_core::control_safety::{GenderLexicon, StyleRegistry};
use mmb_core::eval_metrics::{evaluate_sets, EvalReport, Metric, NamedEpisodes, ReportKeys};
use mmb_core::model::Fusion;
use mmb_core::train::{ControlsConfig, ExampleContext};
use serde::Deserialize;

use crate::layered::{layered, with_config};
use crate::shared::{self, BeamArgs};

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    /// JSON file with any of these options; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation set as `name=episodes.jsonl`; repeatable.
    #[arg(long = "data", value_name = "NAME=PATH")]
    pub data: Vec<String>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Metrics to report (ppl, f1, bleu4, rouge_l); all by default.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
    /// Also generate replies and score f1/bleu4/rouge_l.
    #[arg(long)]
    pub generate: bool,
    /// Generations per dataset when `--generate` is set.
    #[arg(long)]
    pub max_generations: Option<usize>,
    /// Value of the `data` column (the training mix this model saw).
    #[arg(long)]
    pub data_label: Option<String>,
    #[arg(long)]
    pub degender: bool,
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub include_knowledge: bool,
    /// Report file; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub beam: BeamArgs,
}

layered!(EvalArgs {
    opt: [checkpoint, features, batch_size, max_len, max_generations, data_label, output],
    flag: [generate, degender, no_image, include_knowledge],
    list: [data, metrics],
    nested: [beam]
});

fn metric(name: &str) -> anyhow::Result<Metric> {
    match Metric::ALL.into_iter().find(|m| m.name() == name) {
        Some(m) => Ok(m),
        None => bail!("unknown metric `{name}`; expected one of ppl, f1, bleu4, rouge_l"),
    }
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    let config = args.config.clone();
    let args = with_config(args, config.as_deref())?;
    let ckpt = shared::checkpoint(&shared::require(args.checkpoint.clone(), "checkpoint")?)?;
    if args.data.is_empty() {
        bail!("at least one --data NAME=PATH is required");
    }
    let mut sets = Vec::new();
    for spec in &args.data {
        let (name, path) = spec.split_once('=').with_context(|| format!("--data `{spec}` is not NAME=PATH"))?;
        sets.push(NamedEpisodes {
            name: name.to_string(),
            weight: 1.0,
            episodes: shared::episodes(path.as_ref())?,
        });
    }
    let metrics = if args.metrics.is_empty() {
        Metric::ALL.to_vec()
    } else {
        args.metrics.iter().map(|m| metric(m)).collect::<anyhow::Result<_>>()?
    };
    let cfg = &ckpt.params.config;
    let images = shared::images(&ckpt, args.features.as_deref(), args.no_image)?;
    let controls = ControlsConfig {
        degender: args.degender,
        no_image: args.no_image,
        include_knowledge: args.include_knowledge,
        ..ControlsConfig::default()
    };
    let registry = StyleRegistry::builtin();
    let lexicon = GenderLexicon::builtin();
    let ctx = ExampleContext {
        vocab: ckpt.vocab(),
        fusion: cfg.fusion,
        images: images.as_ref(),
        controls: &controls,
        registry: &registry,
        lexicon: &lexicon,
    };
    let beam = args.beam.config()?;
    let generation = args.generate.then(|| (&beam, args.max_generations.unwrap_or(usize::MAX)));
    let keys = ReportKeys {
        features: if cfg.fusion == Fusion::None || args.no_image {
            "none".into()
        } else {
            cfg.feature_kind.to_string()
        },
        data: args.data_label.clone().unwrap_or_else(|| "-".into()),
        fusion: cfg.fusion.to_string(),
    };
    let report = match evaluate_sets(
        &ckpt.params,
        &ctx,
        &sets,
        args.batch_size.unwrap_or(16),
        args.max_len.unwrap_or(cfg.max_positions),
        generation,
    ) {
        Ok(datasets) => EvalReport {
            keys,
            datasets,
            failure: None,
        },
        Err(e) => EvalReport::failed(keys, e.to_string()),
    };
    let mut out = shared::output(args.output.as_ref())?;
    for (i, m) in metrics.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        write!(out, "{}", EvalReport::to_tsv(std::slice::from_ref(&report), *m))?;
    }
    out.flush()?;
    if let Some(reason) = report.failure {
        bail!("evaluation failed: {reason}");
    }
    Ok(())
}
