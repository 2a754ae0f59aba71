use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{train_loop, ExampleContext, Stage, StopReason, TrainConfig, TrainError, TrainOutcome, TrainSet};
use crate::control_safety::{GenderLexicon, StyleRegistry};
use crate::imagefeat::{FeatureStore, ImageBank};
use crate::model::{
    load_checkpoint, params_sha256, save_checkpoint, CheckpointHeader, Fusion, ModelConfig, ModelError, ModelParams,
    StageRecord,
};
use crate::textdata::{assemble_context, bpe_train, load_episodes, ControlSettings, Episode, Vocab};

/// Result of one file-driven training stage.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub checkpoint: PathBuf,
    pub header: CheckpointHeader,
    pub log_path: PathBuf,
}

pub fn load_image_bank(path: &Path) -> Result<ImageBank, TrainError> {
    Ok(ImageBank::from_store(&FeatureStore::open(path)?)?)
}

/// Trains a BPE vocabulary on episode contexts and labels. Control strings
/// are included so they tokenize the same way at train and test time.
pub fn train_vocab(episodes: &[&Episode], size: usize) -> Result<Vocab, TrainError> {
    let mut corpus: Vec<String> = Vec::with_capacity(episodes.len() * 2 + 4);
    for ep in episodes {
        let settings = ControlSettings {
            style: ep.style.clone(),
            gender: None,
            include_knowledge: true,
        };
        corpus.push(assemble_context(ep, &settings));
        corpus.push(ep.label.clone());
    }
    corpus.extend(["f0 m0 f0 m1 f1 m0 f1 m1", "positive/neutral negative"].map(String::from));
    Ok(bpe_train(&corpus, size)?)
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig {
        dropout: b.dropout,
        ..a.clone()
    } == *b
}

/// Runs one stage described by `cfg` and writes its best checkpoint. On
/// divergence the last good parameters are still saved to `cfg.output`
/// before the error is returned.
pub fn train(cfg: &TrainConfig) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    let mut train_eps = Vec::with_capacity(cfg.datasets.len());
    let mut valid_eps = Vec::new();
    for d in &cfg.datasets {
        train_eps.push(load_episodes(&d.train)?);
        if let Some(v) = &d.valid {
            valid_eps.push((d, load_episodes(v)?));
        }
    }

    let (params, vocab, mut provenance) = match &cfg.init_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path, None)?;
            let want = cfg.model.resolve(ckpt.vocab().len());
            if !same_architecture(&ckpt.params.config, &want) {
                return Err(ModelError::ConfigMismatch(format!(
                    "init checkpoint {} does not match the requested model",
                    path.display()
                ))
                .into());
            }
            let mut params = ckpt.params;
            params.config.dropout = want.dropout;
            (params, ckpt.header.vocab.clone(), ckpt.header.provenance)
        }
        None => {
            let vocab = match &cfg.vocab.path {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => train_vocab(&train_eps.iter().flatten().collect::<Vec<_>>(), cfg.vocab.size)?,
            };
            let params = ModelParams::init(&cfg.model.resolve(vocab.len()), cfg.seed)?;
            (params, vocab, Vec::new())
        }
    };
    let config = params.config.clone();

    let images = match (&cfg.features, config.fusion) {
        (Some(p), f) if f != Fusion::None && !cfg.controls.no_image => {
            let bank = load_image_bank(p)?;
            if bank.kind() != config.feature_kind {
                return Err(ModelError::KindMismatch {
                    expected: config.feature_kind,
                    actual: bank.kind(),
                }
                .into());
            }
            Some(bank)
        }
        _ => None,
    };
    let registry = StyleRegistry::builtin();
    let lexicon = GenderLexicon::builtin();
    let ctx = ExampleContext {
        vocab: &vocab,
        fusion: config.fusion,
        images: images.as_ref(),
        controls: &cfg.controls,
        registry: &registry,
        lexicon: &lexicon,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_sets = Vec::with_capacity(cfg.datasets.len());
    for (d, eps) in cfg.datasets.iter().zip(&train_eps) {
        train_sets.push(TrainSet {
            name: d.name.clone(),
            weight: d.weight,
            examples: ctx.build_all(eps, &mut rng)?,
        });
    }
    let mut valid_sets = Vec::with_capacity(valid_eps.len());
    for (d, eps) in &valid_eps {
        valid_sets.push(TrainSet {
            name: d.name.clone(),
            weight: d.weight,
            examples: ctx.build_all(eps, &mut rng)?,
        });
    }

    if let Some(dir) = cfg.output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let log_path = cfg.log_path();
    let mut log = BufWriter::new(File::create(&log_path)?);
    let outcome = train_loop(params, &train_sets, &valid_sets, &cfg.options(), Some(&mut log))?;
    drop(log);

    provenance.push(StageRecord {
        stage: cfg.stage.name().to_string(),
        blob_sha256: params_sha256(&outcome.best),
        steps: outcome.steps,
        best_val_ppl: outcome.best_val_ppl,
        lr: cfg.lr,
        seed: cfg.seed,
        datasets: cfg.datasets.iter().map(|d| d.name.clone()).collect(),
    });
    let header = save_checkpoint(&cfg.output, &outcome.best, &vocab, &provenance)?;
    if let StopReason::Diverged { step } = outcome.stop {
        return Err(TrainError::Diverged {
            step,
            last_good: cfg.output.clone(),
        });
    }
    Ok(TrainRun {
        outcome,
        checkpoint: cfg.output.clone(),
        header,
        log_path,
    })
}

/// Adapt-pretrain then fine-tune from its output. The final checkpoint's
/// provenance lists both stages.
pub fn staged_pipeline(adapt: &TrainConfig, finetune: &TrainConfig) -> Result<(TrainRun, TrainRun), TrainError> {
    if adapt.stage != Stage::AdaptPretrain || finetune.stage != Stage::Finetune {
        return Err(TrainError::Config(
            "staged pipeline needs an adapt_pretrain stage followed by a finetune stage".into(),
        ));
    }
    let first = train(adapt)?;
    let second_cfg = TrainConfig {
        init_checkpoint: Some(first.checkpoint.clone()),
        ..finetune.clone()
    };
    let second = train(&second_cfg)?;
    Ok((first, second))
}
