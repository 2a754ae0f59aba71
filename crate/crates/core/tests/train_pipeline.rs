mod common;

use std::path::{Path, PathBuf};

use common::tiny_config;
use mmb_core::control_safety::StyleRegistry;
use mmb_core::imagefeat::{write_features, FeatureKind};
use mmb_core::model::{load_checkpoint, params_sha256, Fusion, ModelError};
use mmb_core::textdata::write_episodes;
use mmb_core::train::synth::{synth_captions, synth_image_chat, SceneRenderer};
use mmb_core::train::{staged_pipeline, train, TrainConfig, TrainError};
use serde_json::{json, Value};

struct Corpus {
    dir: tempfile::TempDir,
}

impl Corpus {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let renderer = SceneRenderer::new(FeatureKind::Global, 0.5, 5);
        let registry = StyleRegistry::builtin();
        let coco = synth_captions(&renderer, 48, "c", 1);
        let coco_valid = synth_captions(&renderer, 16, "cv", 2);
        let chat = synth_image_chat(&renderer, &registry, 64, "i", 3);
        let chat_valid = synth_image_chat(&renderer, &registry, 16, "iv", 4);
        let write = |name: &str, eps: &[_]| {
            write_episodes(std::fs::File::create(dir.path().join(name)).unwrap(), eps).unwrap();
        };
        write("coco.jsonl", &coco.episodes);
        write("coco_valid.jsonl", &coco_valid.episodes);
        write("chat.jsonl", &chat.episodes);
        write("chat_valid.jsonl", &chat_valid.episodes);
        let mut entries = Vec::new();
        for t in [&coco.images, &coco_valid.images, &chat.images, &chat_valid.images] {
            entries.extend(t.entries());
        }
        write_features(&dir.path().join("images.feat"), FeatureKind::Global, &entries).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, stage: &str, dataset: &str, output: &str, fusion: Fusion) -> Value {
        let (train, valid) = match dataset {
            "coco" => ("coco.jsonl", "coco_valid.jsonl"),
            _ => ("chat.jsonl", "chat_valid.jsonl"),
        };
        json!({
            "stage": stage,
            "seed": 7,
            "lr": 1e-3,
            "warmup_steps": 5,
            "max_steps": 40,
            "eval_interval": 20,
            "patience": 0,
            "batch_size": 8,
            "max_len": 64,
            "datasets": [{"name": dataset, "train": train, "valid": valid}],
            "model": {"custom": tiny_config(0, fusion, FeatureKind::Global)},
            "vocab": {"size": 300},
            "features": "images.feat",
            "output": output,
        })
    }

    fn load(&self, name: &str, value: &Value) -> TrainConfig {
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
        TrainConfig::load(&path).unwrap()
    }
}

fn log_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn staged_pipeline_records_both_stages() {
    let c = Corpus::new();
    let adapt = c.load("adapt.json", &c.config("adapt_pretrain", "coco", "out/adapt.ckpt", Fusion::Early));
    let finetune = c.load("ft.json", &c.config("finetune", "image_chat", "out/ft.ckpt", Fusion::Early));
    let (first, second) = staged_pipeline(&adapt, &finetune).unwrap();

    let ckpt = load_checkpoint(&second.checkpoint, None).unwrap();
    let stages: Vec<&str> = ckpt.header.provenance.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["adapt_pretrain", "finetune"]);
    assert_eq!(ckpt.header.provenance[0].blob_sha256, params_sha256(&first.outcome.best));
    assert_eq!(ckpt.header.provenance[1].blob_sha256, params_sha256(&ckpt.params));
    assert_eq!(ckpt.header.provenance[1].datasets, ["image_chat"]);
    assert_eq!(ckpt.vocab(), &first.header.vocab);

    let log = log_lines(&second.log_path);
    assert!(log.iter().any(|r| r["val_ppl"].is_number()));
    assert!(log.iter().all(|r| r["step"].is_u64()));

    // Starting from the adapted weights beats starting from scratch.
    let scratch_cfg = c.load("scratch.json", &c.config("finetune", "image_chat", "out/scratch.ckpt", Fusion::Early));
    let scratch = train(&scratch_cfg).unwrap();
    let adapted_start = second.outcome.initial_val_ppl().unwrap();
    let scratch_start = scratch.outcome.initial_val_ppl().unwrap();
    assert!(adapted_start < scratch_start, "{adapted_start} vs {scratch_start}");
}

#[test]
fn stages_must_be_in_order() {
    let c = Corpus::new();
    let a = c.load("a.json", &c.config("finetune", "coco", "a.ckpt", Fusion::Early));
    let b = c.load("b.json", &c.config("finetune", "coco", "b.ckpt", Fusion::Early));
    assert!(matches!(staged_pipeline(&a, &b), Err(TrainError::Config(_))));
}

#[test]
fn init_checkpoint_with_other_architecture_is_rejected() {
    let c = Corpus::new();
    let adapt = c.load("adapt.json", &c.config("adapt_pretrain", "coco", "adapt.ckpt", Fusion::Early));
    train(&adapt).unwrap();
    let mut ft = c.config("finetune", "image_chat", "ft.ckpt", Fusion::Late);
    ft["init_checkpoint"] = json!("adapt.ckpt");
    let ft = c.load("ft.json", &ft);
    let err = train(&ft).unwrap_err();
    assert!(matches!(err, TrainError::Model(ModelError::ConfigMismatch(_))), "{err}");
}

#[test]
fn no_image_trains_without_features() {
    let c = Corpus::new();
    let mut cfg = c.config("finetune", "image_chat", "noimg.ckpt", Fusion::Early);
    cfg["features"] = Value::Null;
    cfg["controls"] = json!({"no_image": true});
    let run = train(&c.load("noimg.json", &cfg)).unwrap();
    assert!(run.outcome.best_val_ppl.unwrap().is_finite());
}

#[test]
fn missing_features_are_reported() {
    let c = Corpus::new();
    let mut cfg = c.config("finetune", "image_chat", "x.ckpt", Fusion::Late);
    write_features(&c.path("empty.feat"), FeatureKind::Global, &[]).unwrap();
    cfg["features"] = json!("empty.feat");
    let err = train(&c.load("x.json", &cfg)).unwrap_err();
    assert!(matches!(err, TrainError::MissingFeatures { .. }), "{err}");
}
