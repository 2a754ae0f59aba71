use std::io::Write;
use std::path::PathBuf;

use anyhow::bail;
use clap::Args;
use mmb_core::control_safety::{
    gender_rates, gender_rates_tsv, polarity_split, toxicity_report, Blocklist, Detector, GenderLexicon,
    OffensiveClassifier, StyleRegistry,
};
use mmb_core::decode::{generate, BeamConfig};
use mmb_core::model::Checkpoint;
use mmb_core::textdata::{ControlSettings, Episode};
use mmb_core::train::{ControlsConfig, ExampleContext};
use serde::Deserialize;

use crate::layered::{layered, with_config};
use crate::shared::{self, BeamArgs};

/// Conditioning value that leaves the style line out.
const NO_STYLE: &str = "none";

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyReportArgs {
    /// JSON file with any of these options; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Episodes (JSONL) whose contexts are responded to.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Style conditionings, one report row each; `none` omits the style
    /// line. Defaults to the two polarity buckets.
    #[arg(long = "style")]
    pub styles: Vec<String>,
    /// Blocklist file; the built-in list when omitted.
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    /// Trained offensive-language classifier (JSON), as a second detector.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Split columns by the polarity of the previous speaker's style.
    #[arg(long)]
    pub split_by_partner: bool,
    /// Use only the first N episodes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub beam: BeamArgs,
}

layered!(SafetyReportArgs {
    opt: [checkpoint, input, features, blocklist, classifier, limit, output],
    flag: [split_by_partner, no_image],
    list: [styles],
    nested: [beam]
});

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegenderReportArgs {
    /// JSON file with any of these options; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Episodes (JSONL) whose contexts are responded to.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Gender control strings, one report row each. Defaults to `f0 m0`
    /// and `f1 m1`.
    #[arg(long = "control")]
    pub controls: Vec<String>,
    /// Also report a row generated without any control string.
    #[arg(long)]
    pub uncontrolled: bool,
    /// Gender lexicon file; the built-in lexicon when omitted.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub no_image: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub beam: BeamArgs,
}

layered!(DegenderReportArgs {
    opt: [checkpoint, input, features, lexicon, limit, output],
    flag: [uncontrolled, no_image],
    list: [controls],
    nested: [beam]
});

struct Generator<'a> {
    ckpt: &'a Checkpoint,
    ctx: ExampleContext<'a>,
    beam: BeamConfig,
}

impl Generator<'_> {
    fn reply(&self, ep: &Episode, settings: &ControlSettings) -> anyhow::Result<String> {
        let example = self.ctx.build_with(ep, settings)?;
        let out = generate(&self.ckpt.params, &example, &self.beam)?;
        Ok(self.ckpt.vocab().decode(out.best.content()))
    }
}

fn limited(mut episodes: Vec<Episode>, limit: Option<usize>) -> anyhow::Result<Vec<Episode>> {
    if let Some(n) = limit {
        episodes.truncate(n);
    }
    if episodes.is_empty() {
        bail!("no episodes to respond to");
    }
    Ok(episodes)
}

pub fn safety(args: SafetyReportArgs) -> anyhow::Result<()> {
    let config = args.config.clone();
    let args = with_config(args, config.as_deref())?;
    let ckpt = shared::checkpoint(&shared::require(args.checkpoint.clone(), "checkpoint")?)?;
    let episodes = limited(shared::episodes(&shared::require(args.input.clone(), "input")?)?, args.limit)?;
    let images = shared::images(&ckpt, args.features.as_deref(), args.no_image)?;
    let registry = StyleRegistry::builtin();
    let lexicon = GenderLexicon::builtin();
    let controls = ControlsConfig {
        no_image: args.no_image,
        ..ControlsConfig::default()
    };
    let gen = Generator {
        ckpt: &ckpt,
        ctx: ExampleContext {
            vocab: ckpt.vocab(),
            fusion: ckpt.params.config.fusion,
            images: images.as_ref(),
            controls: &controls,
            registry: &registry,
            lexicon: &lexicon,
        },
        beam: args.beam.config()?,
    };
    let styles = if args.styles.is_empty() {
        vec!["positive/neutral".to_string(), "negative".to_string()]
    } else {
        args.styles.clone()
    };
    for s in &styles {
        let known = s == NO_STYLE || s == "positive/neutral" || s == "negative" || registry.bucket(s).is_some();
        if !known {
            bail!("unknown style `{s}`");
        }
    }
    let blocklist = match &args.blocklist {
        Some(p) => Blocklist::load(p)?,
        None => Blocklist::builtin(),
    };
    let classifier = match &args.classifier {
        Some(p) => Some(OffensiveClassifier::from_json(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let mut detectors: Vec<&dyn Detector> = vec![&blocklist];
    if let Some(c) = &classifier {
        detectors.push(c);
    }
    let split = args.split_by_partner.then(|| polarity_split(&registry));
    let report = toxicity_report(&episodes, &styles, &detectors, split.as_ref(), |ep, style| {
        let settings = ControlSettings {
            style: (style != NO_STYLE).then(|| style.to_string()),
            gender: None,
            include_knowledge: false,
        };
        gen.reply(ep, &settings)
    })?;
    let mut out = shared::output(args.output.as_ref())?;
    write!(out, "{}", report.to_tsv())?;
    out.flush()?;
    Ok(())
}

pub fn degender(args: DegenderReportArgs) -> anyhow::Result<()> {
    let config = args.config.clone();
    let args = with_config(args, config.as_deref())?;
    let ckpt = shared::checkpoint(&shared::require(args.checkpoint.clone(), "checkpoint")?)?;
    let episodes = limited(shared::episodes(&shared::require(args.input.clone(), "input")?)?, args.limit)?;
    let images = shared::images(&ckpt, args.features.as_deref(), args.no_image)?;
    let registry = StyleRegistry::builtin();
    let lexicon = match &args.lexicon {
        Some(p) => GenderLexicon::load(p)?,
        None => GenderLexicon::builtin(),
    };
    let controls = ControlsConfig {
        no_image: args.no_image,
        ..ControlsConfig::default()
    };
    let gen = Generator {
        ckpt: &ckpt,
        ctx: ExampleContext {
            vocab: ckpt.vocab(),
            fusion: ckpt.params.config.fusion,
            images: images.as_ref(),
            controls: &controls,
            registry: &registry,
            lexicon: &lexicon,
        },
        beam: args.beam.config()?,
    };
    let mut conditions: Vec<(String, Option<String>)> = Vec::new();
    if args.uncontrolled {
        conditions.push(("no control".into(), None));
    }
    let strings = if args.controls.is_empty() {
        vec!["f0 m0".to_string(), "f1 m1".to_string()]
    } else {
        args.controls.clone()
    };
    conditions.extend(strings.into_iter().map(|c| (c.clone(), Some(c))));

    let labels: Vec<String> = episodes.iter().map(|e| e.label.clone()).collect();
    let mut rows = vec![gender_rates("reference labels", &labels, &lexicon)];
    for (name, gender) in conditions {
        let mut replies = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            let settings = ControlSettings {
                style: ep.style.clone(),
                gender: gender.clone(),
                include_knowledge: false,
            };
            replies.push(gen.reply(ep, &settings)?);
        }
        rows.push(gender_rates(&name, &replies, &lexicon));
    }
    let mut out = shared::output(args.output.as_ref())?;
    write!(out, "{}", gender_rates_tsv(&rows))?;
    out.flush()?;
    Ok(())
}
