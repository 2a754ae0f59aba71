use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::FIRST_TURN;
use super::{corpus_nll, generation_scores, DatasetScores, EvalReport, ReportKeys};
use crate::control_safety::{GenderLexicon, StyleRegistry};
use crate::decode::{generate, BeamConfig};
use crate::imagefeat::{FeatureKind, ImageBank};
use crate::model::{Fusion, ModelConfig, ModelParams};
use crate::textdata::{Episode, Vocab};
use crate::train::{train_loop, ControlsConfig, ExampleContext, StopReason, TrainError, TrainOptions, TrainSet};

/// Episodes of one named dataset with its mixing weight.
#[derive(Clone, Debug)]
pub struct NamedEpisodes {
    pub name: String,
    pub weight: f64,
    pub episodes: Vec<Episode>,
}

/// Scores `params` on each set. A set containing Image-Chat first turns
/// also yields an `image_chat_first_turn` entry right before it. With
/// `generation = Some((beam, n))`, the first `n` episodes of each set are
/// decoded and scored with F1, BLEU-4 and ROUGE-L.
pub fn evaluate_sets(
    params: &ModelParams<f32>,
    ctx: &ExampleContext<'_>,
    sets: &[NamedEpisodes],
    batch_size: usize,
    max_len: usize,
    generation: Option<(&BeamConfig, usize)>,
) -> Result<Vec<DatasetScores>, TrainError> {
    let mut out = Vec::new();
    for set in sets {
        let first: Vec<Episode> = set.episodes.iter().filter(|e| e.is_first_turn()).cloned().collect();
        if !first.is_empty() {
            out.push(score_set(params, ctx, FIRST_TURN, &first, batch_size, max_len, generation)?);
        }
        out.push(score_set(params, ctx, &set.name, &set.episodes, batch_size, max_len, generation)?);
    }
    Ok(out)
}

fn score_set(
    params: &ModelParams<f32>,
    ctx: &ExampleContext<'_>,
    name: &str,
    episodes: &[Episode],
    batch_size: usize,
    max_len: usize,
    generation: Option<(&BeamConfig, usize)>,
) -> Result<DatasetScores, TrainError> {
    // Evaluation draws (bucket replacement) use a fixed stream so every
    // model sees the same inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let examples = ctx.build_all(episodes, &mut rng)?;
    let nll = corpus_nll(params, &examples, batch_size, max_len)?;
    let generation = match generation {
        Some((beam, n)) => {
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for (ex, ep) in examples.iter().zip(episodes).take(n) {
                let out = generate(params, ex, beam).map_err(super::EvalError::from)?;
                hyps.push(ctx.vocab.decode(out.best.content()));
                refs.push(ep.label.as_str());
            }
            Some(generation_scores(&hyps, &refs)?)
        }
        None => None,
    };
    Ok(DatasetScores {
        dataset: name.to_string(),
        ppl: nll.perplexity()?,
        nll: nll.nll,
        target_tokens: nll.tokens,
        examples: examples.len(),
        generation,
    })
}

/// A named training mix: dataset names drawn from the setup's train sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMix {
    pub name: String,
    pub datasets: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub kinds: Vec<FeatureKind>,
    pub fusions: Vec<Fusion>,
    pub mixes: Vec<DataMix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub kind: Option<FeatureKind>,
    pub fusion: Fusion,
    pub mix: DataMix,
}

impl AblationGrid {
    /// Cells in mix, kind, fusion order. Fusion `None` ignores features, so
    /// it gets one cell per mix instead of one per kind.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut cells = Vec::new();
        for mix in &self.mixes {
            if self.fusions.contains(&Fusion::None) {
                cells.push(AblationCell {
                    kind: None,
                    fusion: Fusion::None,
                    mix: mix.clone(),
                });
            }
            for &kind in &self.kinds {
                for &fusion in self.fusions.iter().filter(|f| **f != Fusion::None) {
                    cells.push(AblationCell {
                        kind: Some(kind),
                        fusion,
                        mix: mix.clone(),
                    });
                }
            }
        }
        cells
    }
}

/// Everything shared by the cells of an ablation run.
pub struct AblationSetup<'a> {
    pub vocab: &'a Vocab,
    /// Architecture; fusion and feature kind are set per cell.
    pub base: ModelConfig,
    pub options: TrainOptions,
    pub controls: ControlsConfig,
    pub train: Vec<NamedEpisodes>,
    /// Every cell is reported on all of these; early stopping uses the ones
    /// in the cell's mix.
    pub valid: Vec<NamedEpisodes>,
    /// Feature banks, one per kind used in the grid.
    pub banks: Vec<ImageBank>,
    pub generation: Option<(BeamConfig, usize)>,
}

fn run_cell(setup: &AblationSetup<'_>, cell: &AblationCell) -> Result<Vec<DatasetScores>, TrainError> {
    let kind = cell.kind.unwrap_or(setup.base.feature_kind);
    let config = setup.base.clone().with_fusion(cell.fusion, kind);
    let bank = match cell.fusion {
        Fusion::None => None,
        _ => Some(
            setup
                .banks
                .iter()
                .find(|b| b.kind() == kind)
                .ok_or_else(|| TrainError::Config(format!("no {kind} feature bank")))?,
        ),
    };
    let registry = StyleRegistry::builtin();
    let lexicon = GenderLexicon::builtin();
    let ctx = ExampleContext {
        vocab: setup.vocab,
        fusion: cell.fusion,
        images: bank,
        controls: &setup.controls,
        registry: &registry,
        lexicon: &lexicon,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(setup.options.seed);
    let in_mix = |n: &NamedEpisodes| cell.mix.datasets.contains(&n.name);
    let mut train = Vec::new();
    for set in setup.train.iter().filter(|s| in_mix(s)) {
        train.push(TrainSet {
            name: set.name.clone(),
            weight: set.weight,
            examples: ctx.build_all(&set.episodes, &mut rng)?,
        });
    }
    if train.is_empty() {
        return Err(TrainError::Config(format!("mix `{}` selects no training data", cell.mix.name)));
    }
    let mut valid = Vec::new();
    for set in setup.valid.iter().filter(|s| in_mix(s)) {
        valid.push(TrainSet {
            name: set.name.clone(),
            weight: set.weight,
            examples: ctx.build_all(&set.episodes, &mut rng)?,
        });
    }
    let params = ModelParams::init(&config, setup.options.seed)?;
    let outcome = train_loop(params, &train, &valid, &setup.options, None)?;
    if let StopReason::Diverged { step } = outcome.stop {
        return Err(TrainError::Config(format!("diverged at step {step}")));
    }
    let generation = setup.generation.as_ref().map(|(b, n)| (b, *n));
    evaluate_sets(
        &outcome.best,
        &ctx,
        &setup.valid,
        setup.options.batch_size,
        setup.options.max_len,
        generation,
    )
}

/// Trains and evaluates every grid cell under the same step budget, in
/// [`AblationGrid::cells`] order. A failing cell yields a report with its
/// failure marker and the remaining cells still run.
pub fn ablation_harness(setup: &AblationSetup<'_>, grid: &AblationGrid) -> Vec<EvalReport> {
    grid.cells()
        .iter()
        .map(|cell| {
            let keys = ReportKeys {
                features: cell.kind.map_or_else(|| "none".to_string(), |k| k.to_string()),
                data: cell.mix.name.clone(),
                fusion: cell.fusion.to_string(),
            };
            match run_cell(setup, cell) {
                Ok(datasets) => EvalReport {
                    keys,
                    datasets,
                    failure: None,
                },
                Err(e) => EvalReport::failed(keys, e.to_string()),
            }
        })
        .collect()
}
