use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use mmb_core::control_safety::StyleRegistry;
use mmb_core::imagefeat::{write_features, FeatureKind};
use mmb_core::textdata::{write_episodes, Episode};
use mmb_core::train::synth::{synth_captions, synth_gendered_dialogue, synth_image_chat, SceneRenderer};
use serde_json::json;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "global")]
    pub feature_kind: FeatureKind,
    /// Standard deviation of the per-image feature noise.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f32,
    /// Training captions; a quarter as many validation and test captions.
    #[arg(long, default_value_t = 256)]
    pub captions: usize,
    /// Training image-chat episodes; a quarter as many validation and test.
    #[arg(long, default_value_t = 400)]
    pub image_chat: usize,
    /// Training gendered dialogue episodes; a quarter as many validation
    /// and test.
    #[arg(long, default_value_t = 400)]
    pub dialogue: usize,
}

fn write(dir: &Path, name: &str, episodes: &[Episode]) -> anyhow::Result<()> {
    let path = dir.join(name);
    write_episodes(File::create(&path).with_context(|| format!("creating {}", path.display()))?, episodes)?;
    Ok(())
}

fn train_config(stage: &str, dataset: &str, prefix: &str, output: &str, kind: FeatureKind, seed: u64) -> serde_json::Value {
    json!({
        "stage": stage,
        "seed": seed,
        "lr": 1e-3,
        "warmup_steps": 20,
        "max_steps": 300,
        "eval_interval": 50,
        "patience": 3,
        "batch_size": 16,
        "max_len": 96,
        "datasets": [{"name": dataset, "train": format!("{prefix}_train.jsonl"), "valid": format!("{prefix}_valid.jsonl")}],
        "model": {"preset": "desk", "fusion": "early", "feature_kind": kind},
        "vocab": {"size": 400},
        "features": "images.feat",
        "output": output,
    })
}

/// Writes synthetic captioning, image-chat and gendered-dialogue splits,
/// one feature file for every image, and ready-to-run stage configs.
pub fn run(args: &SynthArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let dir = args.out.as_path();
    let renderer = SceneRenderer::new(args.feature_kind, args.noise, args.seed);
    let registry = StyleRegistry::builtin();
    let quarter = |n: usize| (n / 4).max(1);
    let mut images = Vec::new();
    let s = args.seed.wrapping_mul(1000);

    for (split, n, off) in [("train", args.captions, 1), ("valid", quarter(args.captions), 2), ("test", quarter(args.captions), 3)] {
        let task = synth_captions(&renderer, n, &format!("coco_{split}_"), s + off);
        write(dir, &format!("coco_{split}.jsonl"), &task.episodes)?;
        images.extend(task.images.entries());
    }
    for (split, n, off) in [("train", args.image_chat, 4), ("valid", quarter(args.image_chat), 5), ("test", quarter(args.image_chat), 6)] {
        let task = synth_image_chat(&renderer, &registry, n, &format!("ic_{split}_"), s + off);
        write(dir, &format!("image_chat_{split}.jsonl"), &task.episodes)?;
        images.extend(task.images.entries());
    }
    for (split, n, off) in [("train", args.dialogue, 7), ("valid", quarter(args.dialogue), 8), ("test", quarter(args.dialogue), 9)] {
        write(dir, &format!("convai2_{split}.jsonl"), &synth_gendered_dialogue(n, s + off))?;
    }
    write_features(&dir.join("images.feat"), args.feature_kind, &images)?;

    let configs = [
        ("adapt.json", train_config("adapt_pretrain", "coco", "coco", "checkpoints/adapt.ckpt", args.feature_kind, args.seed)),
        ("finetune.json", train_config("finetune", "image_chat", "image_chat", "checkpoints/finetune.ckpt", args.feature_kind, args.seed)),
    ];
    for (name, cfg) in configs {
        std::fs::write(dir.join(name), serde_json::to_string_pretty(&cfg)? + "\n")?;
    }
    println!("wrote synthetic data for {} images to {}", images.len(), dir.display());
    Ok(())
}
