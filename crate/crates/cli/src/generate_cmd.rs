use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use mmb_core::control_safety::{GenderLexicon, StyleRegistry};
use mmb_core::decode::generate;
use mmb_core::textdata::ControlSettings;
use mmb_core::train::{ControlsConfig, ExampleContext};
use serde::{Deserialize, Serialize};

use crate::layered::{layered, with_config};
use crate::shared::{self, BeamArgs};

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateArgs {
    /// JSON file with any of these options; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Episodes (JSONL) to respond to.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Predictions (JSONL); stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Style line for every episode, overriding the episode's own style.
    #[arg(long)]
    pub style: Option<String>,
    /// Gender control string such as `f0 m0`.
    #[arg(long)]
    pub gender: Option<String>,
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub include_knowledge: bool,
    #[command(flatten)]
    pub beam: BeamArgs,
}

layered!(GenerateArgs {
    opt: [checkpoint, input, output, features, style, gender],
    flag: [no_image, include_knowledge],
    list: [],
    nested: [beam]
});

#[derive(Serialize)]
struct Prediction<'a> {
    index: usize,
    text: String,
    reference: &'a str,
    score: f64,
    finished: bool,
    token_ids: &'a [u32],
    fallback_steps: usize,
}

pub fn run(args: GenerateArgs) -> anyhow::Result<()> {
    let config = args.config.clone();
    let args = with_config(args, config.as_deref())?;
    let ckpt = shared::checkpoint(&shared::require(args.checkpoint.clone(), "checkpoint")?)?;
    let episodes = shared::episodes(&shared::require(args.input.clone(), "input")?)?;
    let beam = args.beam.config()?;
    let images = shared::images(&ckpt, args.features.as_deref(), args.no_image)?;
    let controls = ControlsConfig {
        no_image: args.no_image,
        ..ControlsConfig::default()
    };
    let registry = StyleRegistry::builtin();
    let lexicon = GenderLexicon::builtin();
    let ctx = ExampleContext {
        vocab: ckpt.vocab(),
        fusion: ckpt.params.config.fusion,
        images: images.as_ref(),
        controls: &controls,
        registry: &registry,
        lexicon: &lexicon,
    };
    let mut out = shared::output(args.output.as_ref())?;
    for (index, ep) in episodes.iter().enumerate() {
        let settings = ControlSettings {
            style: args.style.clone().or_else(|| ep.style.clone()),
            gender: args.gender.clone(),
            include_knowledge: args.include_knowledge,
        };
        let example = ctx.build_with(ep, &settings)?;
        let result = generate(&ckpt.params, &example, &beam)?;
        let best = &result.best;
        let line = Prediction {
            index,
            text: ckpt.vocab().decode(best.content()),
            reference: &ep.label,
            score: best.score,
            finished: best.finished,
            token_ids: best.content(),
            fallback_steps: result.fallback_steps,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}
