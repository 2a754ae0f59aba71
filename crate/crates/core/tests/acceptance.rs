//! Acceptance run: one PASS/FAIL line per criterion. An optional argument
//! filters criteria by substring.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use mmb_core::control_safety::{
    assess, classify_gender, percent, toxicity_report, Blocklist, Bucket, Detector, GenderLexicon, StyleRegistry,
};
use mmb_core::decode::{exhaustive_oracle, generate, BeamConfig, TransformerStepper};
use mmb_core::eval_metrics::{bleu4, f1, perplexity, rouge_l};
use mmb_core::imagefeat::{synth_features, write_features, FeatureKind, FeatureStore, ImageBank};
use mmb_core::model::{
    decode, decode_step, encode, encode_tensor, forward_loss, grad_check_model, load_checkpoint, params_sha256,
    save_checkpoint, Dropout, EncoderInput, Fusion, ModelConfig, ModelParams,
};
use mmb_core::numerics::{Graph, Tensor};
use mmb_core::serve::{AppState, ChatModel, Defaults};
use mmb_core::textdata::{make_batch, ControlSettings, DatasetRole, Episode, Example, Vocab, BOS_ID};
use mmb_core::train::synth::{synth_captions, synth_gendered_dialogue, synth_image_chat, SceneRenderer};
use mmb_core::train::{train_vocab, ControlsConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::desk(300);
    let p = ModelParams::<f64>::init(&cfg, 3).map_err(|e| e.to_string())?;
    let ex = |i: u32| Example {
        input: (11..16 + i).collect(),
        label: vec![40 + i, 41, 42],
        image: i.is_multiple_of(2).then(|| Arc::new(synth_features(&format!("img{i}"), cfg.feature_kind, 1))),
    };
    let batch = make_batch(&[ex(0), ex(1)], 64).map_err(|e| e.to_string())?;
    let r = grad_check_model(&p, &batch, 1e-5, 240, 7).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(r.checked >= 200, || format!("only {} coordinates checked", r.checked))?;
    ensure(r.max_rel_error <= 1e-4, || format!("max relative error {:.3e}, worst {:?}", r.max_rel_error, r.worst))?;
    within(elapsed, 120)?;
    Ok(format!(
        "{} coordinates, max rel error {:.2e}, {:.1}s",
        r.checked,
        r.max_rel_error,
        elapsed.as_secs_f64()
    ))
}

fn caption_bank(tasks: &[&ImageBank]) -> ImageBank {
    let mut bank = ImageBank::new(tasks[0].kind());
    for t in tasks {
        for f in t.entries() {
            bank.insert(f).expect("same kind");
        }
    }
    bank
}

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let renderer = SceneRenderer::new(FeatureKind::Global, 0.5, 11);
    let task = synth_captions(&renderer, 32, "c", 1);
    let vocab = train_vocab(&task.episodes.iter().collect::<Vec<_>>(), 320).map_err(|e| e.to_string())?;
    let fx = Fixture {
        vocab: &vocab,
        config: ModelConfig::desk(vocab.len()).with_fusion(Fusion::Early, FeatureKind::Global),
        images: Some(&task.images),
        controls: ControlsConfig::default(),
    };
    let set = fx.set("coco", &task.episodes, 0);
    let opts = TrainOptions {
        max_steps: 2000,
        eval_interval: 25,
        target_ppl: Some(1.2),
        max_len: 64,
        ..options(2000, 0)
    };
    let out = fx.train(std::slice::from_ref(&set), std::slice::from_ref(&set), &opts);
    let ppl = perplexity(&out.best, &set.examples, 16, 64).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(ppl <= 1.2, || format!("train ppl {ppl:.4} after {} steps", out.steps))?;
    ensure(out.steps <= 2000, || format!("{} steps", out.steps))?;
    within(elapsed, 300)?;
    Ok(format!("train ppl {ppl:.4} at step {}, {:.1}s", out.steps, elapsed.as_secs_f64()))
}

fn fusion_benefit() -> Outcome {
    let renderer = SceneRenderer::new(FeatureKind::Global, 0.5, 11);
    let train = synth_captions(&renderer, 128, "tr", 1);
    let valid = synth_captions(&renderer, 64, "va", 2);
    let test = synth_captions(&renderer, 64, "te", 3);
    let vocab = train_vocab(&train.episodes.iter().collect::<Vec<_>>(), 320).map_err(|e| e.to_string())?;
    let bank = caption_bank(&[&train.images, &valid.images, &test.images]);
    let mut ppl = Vec::new();
    for fusion in [Fusion::None, Fusion::Early, Fusion::Late] {
        let fx = Fixture {
            vocab: &vocab,
            config: ModelConfig::desk(vocab.len()).with_fusion(fusion, FeatureKind::Global),
            images: Some(&bank),
            controls: ControlsConfig::default(),
        };
        let opts = TrainOptions {
            max_len: 64,
            ..options(200, 0)
        };
        let out = fx.train(&[fx.set("coco", &train.episodes, 0)], &[fx.set("coco", &valid.episodes, 1)], &opts);
        let held = fx.set("coco", &test.episodes, 2);
        ppl.push(perplexity(&out.best, &held.examples, 16, 64).map_err(|e| e.to_string())?);
    }
    let (none, early, late) = (ppl[0], ppl[1], ppl[2]);
    let detail = format!("test ppl none {none:.4}, early {early:.4}, late {late:.4} (ordering of early/late not asserted)");
    ensure(early <= 0.8 * none, || format!("early not 20% below none: {detail}"))?;
    ensure(late <= 0.8 * none, || format!("late not 20% below none: {detail}"))?;
    Ok(detail)
}

fn tiny_decoder(vocab: usize, max_positions: usize, seed: u64, sharpen: f64) -> ModelParams<f64> {
    let cfg = ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        max_positions,
        ..tiny_config(vocab, Fusion::None, FeatureKind::Global)
    };
    let mut p = ModelParams::<f64>::init(&cfg, seed).expect("init");
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x *= sharpen;
        }
    }
    p
}

fn decoder_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 60;
    let mut non_greedy = 0;
    for trial in 0..trials {
        let v = rng.gen_range(3..=6usize);
        let max_length = rng.gen_range(2..=5usize);
        let min_length = rng.gen_range(0..max_length);
        let p = tiny_decoder(v, 16, trial, rng.gen_range(5.0..25.0));
        let ctx_len = rng.gen_range(0..6);
        let input: Vec<u32> = (0..ctx_len).map(|_| rng.gen_range(2..v as u32)).collect();
        let ex = Example {
            input,
            label: vec![],
            image: None,
        };
        let cfg = BeamConfig {
            beam_size: v.pow(max_length as u32),
            min_length,
            max_length,
            ..BeamConfig::default()
        };
        let beam = generate(&p, &ex, &cfg).map_err(|e| e.to_string())?;
        let batch = make_batch(std::slice::from_ref(&ex), 16).map_err(|e| e.to_string())?;
        let (mem, mask) = encode_tensor(&p, &EncoderInput::from_batch(&batch)).map_err(|e| e.to_string())?;
        let mut stepper = TransformerStepper::new(&p, &mem, &mask).map_err(|e| e.to_string())?;
        let oracle = exhaustive_oracle(&mut stepper, &ex.input, &cfg).map_err(|e| e.to_string())?;
        ensure(beam.best.tokens == oracle.tokens, || {
            format!(
                "trial {trial} (V={v}, min={min_length}, max={max_length}): beam {:?} vs oracle {:?}",
                beam.best.tokens, oracle.tokens
            )
        })?;
        let greedy = generate(&p, &ex, &BeamConfig { beam_size: 1, ..cfg.clone() }).map_err(|e| e.to_string())?;
        non_greedy += (greedy.best.tokens != oracle.tokens) as usize;
    }
    Ok(format!("{trials}/{trials} exact matches ({non_greedy} where greedy differs)"))
}

fn decode_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let models: Vec<ModelParams<f64>> = (0..10).map(|s| tiny_decoder(32, 64, 100 + s, 3.0)).collect();
    let n = 1000;
    let mut fallbacks = 0;
    for i in 0..n {
        let p = &models[i % models.len()];
        let ctx_len = rng.gen_range(0..20);
        let input: Vec<u32> = (0..ctx_len).map(|_| rng.gen_range(3..32)).collect();
        let min_length = rng.gen_range(0..10);
        let cfg = BeamConfig {
            beam_size: rng.gen_range(1..=5),
            min_length,
            max_length: min_length + rng.gen_range(1..=12),
            ..BeamConfig::default()
        };
        let ex = Example {
            input: input.clone(),
            label: vec![],
            image: None,
        };
        let out = generate(p, &ex, &cfg).map_err(|e| e.to_string())?;
        fallbacks += out.fallback_steps;
        check_decode_invariants(out.best.content(), &input, cfg.min_length, 3)
            .map_err(|e| format!("decode {i} with {cfg:?}: {e}"))?;
        ensure(out.best.tokens.len() <= cfg.max_length, || format!("decode {i} exceeds max_length"))?;
    }
    ensure(fallbacks == 0, || format!("{fallbacks} fallback steps"))?;
    Ok(format!("{n} decodes, 0 violations, 0 fallback steps"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    type Pair = (&'static str, fn(&str, &str) -> f64, fn(&str, &str) -> f64);
    let metrics: [Pair; 3] = [
        ("f1", f1, oracle_f1),
        ("bleu4", bleu4, oracle_bleu4),
        ("rouge_l", rouge_l, oracle_rouge_l),
    ];
    for (name, lib, oracle) in metrics {
        for case in 0..100 {
            let hyp = random_sentence(&mut rng);
            let reference = if case % 4 == 0 {
                format!("{hyp} {}", random_sentence(&mut rng))
            } else {
                random_sentence(&mut rng)
            };
            let (a, b) = (lib(&hyp, &reference), oracle(&hyp, &reference));
            let err = (a - b).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, || format!("{name}({hyp:?}, {reference:?}) = {a}, oracle {b}"))?;
        }
    }
    Ok(format!("300 cases, max |diff| {worst:.1e}"))
}

fn uniform_perplexity() -> Outcome {
    let v = 16;
    let mut p = ModelParams::<f32>::init(&tiny_config(v, Fusion::None, FeatureKind::Global), 3).expect("init");
    let idx = p.names().iter().position(|n| n == "tok_emb").ok_or("no tok_emb")?;
    let shape = p.tensors()[idx].shape().to_vec();
    p.tensors_mut()[idx] = Tensor::zeros(&shape);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let examples: Vec<Example> = (0..12)
        .map(|_| Example {
            input: (0..rng.gen_range(1..10)).map(|_| rng.gen_range(3..v as u32)).collect(),
            label: (0..rng.gen_range(1..8)).map(|_| rng.gen_range(3..v as u32)).collect(),
            image: None,
        })
        .collect();
    let ppl = perplexity(&p, &examples, 5, 32).map_err(|e| e.to_string())?;
    ensure((ppl - v as f64).abs() <= 1e-3, || format!("ppl {ppl}, expected {v}"))?;
    Ok(format!("ppl {ppl:.6} for V={v}"))
}

fn degendering() -> Outcome {
    let lexicon = GenderLexicon::builtin();
    let train = synth_gendered_dialogue(400, 1);
    let test = synth_gendered_dialogue(40, 2);
    let vocab = train_vocab(&train.iter().collect::<Vec<_>>(), 360).map_err(|e| e.to_string())?;
    let fx = Fixture {
        vocab: &vocab,
        config: ModelConfig::desk(vocab.len()).with_fusion(Fusion::None, FeatureKind::Global),
        images: None,
        controls: ControlsConfig {
            degender: true,
            ..Default::default()
        },
    };
    let opts = TrainOptions {
        max_len: 96,
        ..options(300, 0)
    };
    let out = fx.train(&[fx.set("convai2", &train, 0)], &[], &opts);
    let beam = BeamConfig {
        beam_size: 4,
        min_length: 3,
        max_length: 24,
        ..BeamConfig::default()
    };
    let mut counts = Vec::new();
    for control in ["f0 m0", "f1 m1"] {
        let settings = ControlSettings {
            style: None,
            gender: Some(control.into()),
            include_knowledge: false,
        };
        let mut gendered = 0;
        for ep in &test {
            let ex = fx.with_context(|ctx| ctx.build_with(ep, &settings)).map_err(|e| e.to_string())?;
            let o = generate(&out.best, &ex, &beam).map_err(|e| e.to_string())?;
            let flags = classify_gender(&vocab.decode(o.best.content()), &lexicon);
            gendered += (flags.female || flags.male) as usize;
        }
        counts.push(gendered);
    }
    let (neutral, gendered) = (counts[0], counts[1]);
    let detail = format!(
        "gendered utterances: f0 m0 {neutral}/{n} ({:.1}%), f1 m1 {gendered}/{n} ({:.1}%)",
        percent(neutral, test.len()),
        percent(gendered, test.len()),
        n = test.len()
    );
    ensure(gendered > 0 && gendered >= 5 * neutral, || format!("reduction below 5x: {detail}"))?;
    Ok(detail)
}

fn bucket_rate() -> Outcome {
    let registry = StyleRegistry::builtin();
    let styles: Vec<&str> = registry.iter().map(|(s, _)| s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let draws = 10_000;
    let mut replaced = 0;
    for _ in 0..draws {
        let style = styles[rng.gen_range(0..styles.len())];
        let out = registry.bucket_replace(style, 0.75, &mut rng).map_err(|e| e.to_string())?;
        let bucket = registry.bucket(style).ok_or("unknown style")?;
        if out == bucket.replacement() {
            replaced += 1;
        } else {
            ensure(out == style, || format!("`{style}` became `{out}`"))?;
        }
    }
    let rate = replaced as f64 / draws as f64;
    ensure((rate - 0.75).abs() <= 0.02, || format!("rate {rate:.4}"))?;
    Ok(format!("{replaced}/{draws} replaced ({:.2}%)", 100.0 * rate))
}

struct ContainsBad;

impl Detector for ContainsBad {
    fn name(&self) -> &str {
        "bad"
    }
    fn is_offensive(&self, text: &str) -> bool {
        text.contains("bad")
    }
}

fn toxicity_arithmetic() -> Outcome {
    let episodes: Vec<Episode> = (0..20)
        .map(|i| Episode {
            dataset_role: DatasetRole::Convai2,
            context_turns: vec![format!("turn {i}")],
            persona_lines: vec![],
            knowledge: None,
            image_ref: None,
            style: None,
            partner_style: None,
            label: if i < 7 { format!("bad {i}") } else { format!("fine {i}") },
        })
        .collect();
    let conds = vec!["echo".to_string(), "clean".to_string()];
    let report = toxicity_report(&episodes, &conds, &[&ContainsBad], None, |ep, cond| {
        Ok::<_, String>(if cond == "echo" { ep.label.clone() } else { "fine".into() })
    })
    .map_err(|e| e.to_string())?;
    let echo = report.row("echo").and_then(|r| r.cell("all", "bad")).ok_or("missing echo cell")?;
    let clean = report.row("clean").and_then(|r| r.cell("all", "bad")).ok_or("missing clean cell")?;
    ensure(echo.offensive == 7 && echo.total == 20, || format!("{echo:?}"))?;
    ensure(echo.percent() == 35.0, || format!("echo percent {}", echo.percent()))?;
    ensure(clean.offensive == 0 && clean.percent() == 0.0, || format!("{clean:?}"))?;
    ensure(percent(1, 3) == 100.0 / 3.0, || "percent(1, 3) is not 100/3".into())?;
    let tsv = report.to_tsv();
    ensure(tsv.contains("echo\t35.00\t7\t20"), || format!("tsv {tsv:?}"))?;
    Ok("7/20 -> 35.00%, 0/20 -> 0.00%".into())
}

fn toxicity_ordering() -> Outcome {
    let registry = StyleRegistry::builtin();
    let blocklist = Blocklist::builtin();
    let renderer = SceneRenderer::new(FeatureKind::Global, 0.5, 3);
    let train = synth_image_chat(&renderer, &registry, 400, "i", 4);
    let test = synth_image_chat(&renderer, &registry, 40, "t", 5);
    let vocab = train_vocab(&train.episodes.iter().collect::<Vec<_>>(), 400).map_err(|e| e.to_string())?;
    let fx = Fixture {
        vocab: &vocab,
        config: ModelConfig::desk(vocab.len()).with_fusion(Fusion::None, FeatureKind::Global),
        images: None,
        controls: ControlsConfig::default(),
    };
    let opts = TrainOptions {
        max_len: 96,
        ..options(300, 0)
    };
    let out = fx.train(&[fx.set("image_chat", &train.episodes, 0)], &[], &opts);
    let beam = BeamConfig {
        beam_size: 4,
        min_length: 3,
        max_length: 24,
        ..BeamConfig::default()
    };
    let negative = "Cruel";
    let positive = "Cheerful";
    ensure(registry.bucket(negative) == Some(Bucket::Negative), || "Cruel is not negative".into())?;
    ensure(registry.bucket(positive) == Some(Bucket::Positive), || "Cheerful is not positive".into())?;
    let conds = vec![negative.to_string(), positive.to_string()];
    let report = toxicity_report(&test.episodes, &conds, &[&blocklist], None, |ep, style| {
        let settings = ControlSettings {
            style: Some(style.into()),
            gender: None,
            include_knowledge: false,
        };
        let ex = fx.with_context(|ctx| ctx.build_with(ep, &settings)).map_err(|e| e.to_string())?;
        let o = generate(&out.best, &ex, &beam).map_err(|e| e.to_string())?;
        Ok::<_, String>(vocab.decode(o.best.content()))
    })
    .map_err(|e| e.to_string())?;
    let cell = |c: &str| report.row(c).map(|r| r.cells[0].clone()).ok_or(format!("missing row {c}"));
    let (neg, pos) = (cell(negative)?, cell(positive)?);
    let detail = format!(
        "toxicity {negative} {:.1}% ({}/{}), {positive} {:.1}% ({}/{})",
        neg.percent(),
        neg.offensive,
        neg.total,
        pos.percent(),
        pos.offensive,
        pos.total
    );
    ensure(neg.percent() > pos.percent(), || format!("no ordering: {detail}"))?;
    Ok(detail)
}

fn props_model() -> ModelParams<f64> {
    let cfg = ModelConfig::desk(64).with_fusion(Fusion::Early, FeatureKind::Global);
    ModelParams::<f32>::init(&cfg, 21).expect("init").cast::<f64>()
}

fn props_examples() -> (Example, Example) {
    let a = Example {
        input: vec![11, 12, 13, 14, 15],
        label: vec![20, 21, 22],
        image: Some(Arc::new(synth_features("a", FeatureKind::Global, 4))),
    };
    let b = Example {
        input: (30..42).collect(),
        label: (40..47).collect(),
        image: None,
    };
    (a, b)
}

fn padding_invariance() -> Outcome {
    let p = props_model();
    let (a, b) = props_examples();
    let loss = |batch| -> Result<f64, String> {
        let g = Graph::<f64>::inference();
        Ok(forward_loss(&g, &p, batch, &mut Dropout::off()).map_err(|e| e.to_string())?.0.item())
    };
    let single = make_batch(std::slice::from_ref(&a), 64).map_err(|e| e.to_string())?;
    let padded = single.pad_to(single.input_len + 9, single.target_len + 6);
    let loss_diff = (loss(&single)? - loss(&padded)?).abs();

    let pair = make_batch(&[a.clone(), b], 64).map_err(|e| e.to_string())?;
    let (m1, k1) = encode_tensor(&p, &EncoderInput::from_batch(&single)).map_err(|e| e.to_string())?;
    let (m2, k2) = encode_tensor(&p, &EncoderInput::from_batch(&pair)).map_err(|e| e.to_string())?;
    let prefix = [BOS_ID, 20, 21];
    let l1 = decode_step(&p, &m1, &k1, &prefix, 1).map_err(|e| e.to_string())?;
    let both: Vec<u32> = prefix.iter().chain(&[BOS_ID, 40, 41]).copied().collect();
    let l2 = decode_step(&p, &m2, &k2, &both, 2).map_err(|e| e.to_string())?;
    let v = p.config.vocab_size;
    let logit_diff = l1
        .data()
        .iter()
        .zip(&l2.data()[..v])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    ensure(loss_diff <= 1e-6, || format!("loss changed by {loss_diff:.3e} under padding"))?;
    ensure(logit_diff <= 1e-6, || format!("logits changed by {logit_diff:.3e} when batched"))?;
    Ok(format!("loss diff {loss_diff:.1e}, batched logit diff {logit_diff:.1e}"))
}

fn causality() -> Outcome {
    let p = props_model();
    let (a, _) = props_examples();
    let batch = make_batch(std::slice::from_ref(&a), 64).map_err(|e| e.to_string())?;
    let v = p.config.vocab_size;
    let logits = |dec: &[u32]| -> Result<Vec<f64>, String> {
        let g = Graph::<f64>::inference();
        let enc = encode(&g, &p, &EncoderInput::from_batch(&batch), &mut Dropout::off()).map_err(|e| e.to_string())?;
        Ok(decode(&g, &p, &enc, dec, dec.len(), &mut Dropout::off())
            .map_err(|e| e.to_string())?
            .value()
            .data()
            .to_vec())
    };
    let base = [BOS_ID, 20, 21, 22, 23, 24, 25];
    let reference = logits(&base)?;
    let mut checked = 0;
    for j in 1..base.len() {
        let mut changed = base;
        changed[j] = 50;
        let other = logits(&changed)?;
        ensure(reference[..j * v] == other[..j * v], || {
            format!("changing position {j} altered earlier logits")
        })?;
        ensure(reference[j * v..] != other[j * v..], || format!("position {j} had no effect"))?;
        checked += 1;
    }
    Ok(format!("{checked} perturbations, earlier positions bit-identical"))
}

fn checkpoint_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vocab = Vocab::bytes_only();
    let cfg = ModelConfig::desk(vocab.len());
    let p = ModelParams::<f32>::init(&cfg, 5).map_err(|e| e.to_string())?;
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&a, &p, &vocab, &[]).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&a, Some(&cfg)).map_err(|e| e.to_string())?;
    let same_bits = p
        .tensors()
        .iter()
        .zip(loaded.params.tensors())
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(u, w)| u.to_bits() == w.to_bits()));
    ensure(same_bits, || "loaded weights differ".into())?;
    save_checkpoint(&b, &loaded.params, loaded.vocab(), &loaded.header.provenance).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).map_err(|e| e.to_string())?, std::fs::read(&b).map_err(|e| e.to_string())?);
    ensure(ba == bb, || "re-saved file differs".into())?;
    Ok(format!("{} params, {} bytes, files identical", p.num_params(), ba.len()))
}

fn seeded_determinism() -> Outcome {
    let renderer = SceneRenderer::new(FeatureKind::Global, 0.5, 7);
    let task = synth_captions(&renderer, 24, "d", 1);
    let vocab = train_vocab(&task.episodes.iter().collect::<Vec<_>>(), 300).map_err(|e| e.to_string())?;
    let fx = Fixture {
        vocab: &vocab,
        config: ModelConfig {
            dropout: 0.1,
            ..tiny_config(vocab.len(), Fusion::Early, FeatureKind::Global)
        },
        images: Some(&task.images),
        controls: ControlsConfig::default(),
    };
    let set = fx.set("coco", &task.episodes, 0);
    let run = |seed| {
        let opts = TrainOptions {
            batch_size: 4,
            eval_interval: 10,
            max_len: 64,
            ..options(30, seed)
        };
        fx.train(std::slice::from_ref(&set), std::slice::from_ref(&set), &opts)
    };
    let (x, y, z) = (run(4), run(4), run(5));
    let bits = |o: &mmb_core::train::TrainOutcome| o.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    ensure(params_sha256(&x.best) == params_sha256(&y.best), || "same seed, different weights".into())?;
    ensure(bits(&x) == bits(&y), || "same seed, different losses".into())?;
    ensure(params_sha256(&x.best) != params_sha256(&z.best), || "seed has no effect".into())?;
    Ok(format!("2 runs x {} steps bit-identical, other seed differs", x.steps))
}

fn serve_session() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vocab = Vocab::bytes_only();
    let cfg = ModelConfig::desk(vocab.len());
    let features = dir.path().join("images.feat");
    let entries: Vec<_> = (0..3)
        .map(|i| synth_features(&format!("img{i}"), cfg.feature_kind, 2))
        .collect();
    write_features(&features, cfg.feature_kind, &entries).map_err(|e| e.to_string())?;
    let store = FeatureStore::open(&features).map_err(|e| e.to_string())?;
    let beam = BeamConfig::default();
    let model = ChatModel::new(
        ModelParams::init(&cfg, 8).map_err(|e| e.to_string())?,
        vocab,
        Some(store),
        Blocklist::builtin(),
        None,
        beam.clone(),
        Defaults::default(),
    )
    .map_err(|e| e.to_string())?;
    let state = Arc::new(AppState::new(model, None));
    let addr = spawn_server(state.clone());
    let m = &state.model;

    let check_reply = |reply: &serde_json::Value| -> Result<(), String> {
        let text = reply["text"].as_str().ok_or("reply without text")?;
        let ids = |k: &str| -> Vec<u32> {
            reply["stats"][k]
                .as_array()
                .map(|a| a.iter().filter_map(|x| x.as_u64()).map(|x| x as u32).collect())
                .unwrap_or_default()
        };
        let (tokens, context) = (ids("token_ids"), ids("context_ids"));
        ensure(m.vocab.decode(&tokens) == text, || "text does not match token ids".into())?;
        check_decode_invariants(&tokens, &context, beam.min_length, beam.block_ngram)?;
        ensure(reply["stats"]["fallback_steps"] == 0, || "fallback steps in reply".into())?;
        let verdict = serde_json::to_value(assess(text, &m.blocklist, None, &m.lexicon)).map_err(|e| e.to_string())?;
        ensure(reply["safety"] == verdict, || "safety verdict differs from offline assessment".into())
    };

    let (status, created) = http(addr, "POST", "/session", Some(r#"{"image_id":"img1"}"#));
    ensure(status == 200, || format!("POST /session: {status} {created}"))?;
    let sid = created["session_id"].as_str().ok_or("no session id")?.to_string();
    check_reply(&created["opening"])?;
    let script = [
        "What do you see?",
        "Do you like it?",
        "Why is that?",
        "Tell me more about the colors.",
        "Would you go there?",
        "What else is nearby?",
        "Thanks, bye!",
    ];
    for (i, msg) in script.iter().enumerate() {
        let body = serde_json::json!({"session_id": sid, "message": msg}).to_string();
        let (status, resp) = http(addr, "POST", "/chat", Some(&body));
        ensure(status == 200, || format!("turn {}: {status} {resp}", i + 1))?;
        ensure(resp["turns"] == 1 + 2 * (i + 1), || format!("turn {} reports {} turns", i + 1, resp["turns"]))?;
        check_reply(&resp)?;
    }
    let (_, view) = http(addr, "GET", &format!("/session/{sid}"), None);
    let history = view["history"].as_array().ok_or("no history")?;
    ensure(history.len() == 1 + 2 * script.len(), || format!("{} history turns", history.len()))?;

    // Two sessions driven concurrently must keep their own images and turns.
    let run_session = |image: &'static str, tag: &'static str| {
        std::thread::spawn(move || -> Result<(String, Vec<String>), String> {
            let body = serde_json::json!({"image_id": image}).to_string();
            let (_, created) = http(addr, "POST", "/session", Some(&body));
            let sid = created["session_id"].as_str().ok_or("no session id")?.to_string();
            let mut sent = Vec::new();
            for i in 0..3 {
                let msg = format!("{tag} message {i}");
                let body = serde_json::json!({"session_id": sid, "message": msg}).to_string();
                let (status, resp) = http(addr, "POST", "/chat", Some(&body));
                if status != 200 {
                    return Err(format!("{tag}: {status} {resp}"));
                }
                sent.push(msg);
            }
            Ok((sid, sent))
        })
    };
    let a = run_session("img0", "zebra");
    let b = run_session("img2", "quokka");
    let (sa, sent_a) = a.join().map_err(|_| "session thread panicked")??;
    let (sb, sent_b) = b.join().map_err(|_| "session thread panicked")??;
    for (sid, image, sent, foreign) in [(&sa, "img0", &sent_a, "quokka"), (&sb, "img2", &sent_b, "zebra")] {
        let (_, view) = http(addr, "GET", &format!("/session/{sid}"), None);
        ensure(view["image_id"] == image, || format!("session {sid} has image {}", view["image_id"]))?;
        let human: Vec<String> = view["history"]
            .as_array()
            .ok_or("no history")?
            .iter()
            .filter(|t| t["speaker"] == "human")
            .filter_map(|t| t["text"].as_str().map(str::to_string))
            .collect();
        ensure(&human == sent, || format!("session {sid} human turns {human:?}"))?;
        ensure(!view.to_string().contains(foreign), || format!("session {sid} mentions `{foreign}`"))?;
    }
    Ok("8 replies checked in one session; 2 concurrent sessions isolated".into())
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    ("gradient correctness (desk model, f64 finite differences)", gradient_correctness),
    ("overfit sanity (32 captions, train ppl <= 1.2)", overfit_sanity),
    ("fusion benefit (early and late >= 20% below none)", fusion_benefit),
    ("decoder oracle (saturated beam == exhaustive)", decoder_oracle),
    ("blocking and min-length invariants (1000 decodes)", decode_invariants),
    ("metric oracles (f1, bleu4, rouge_l)", metric_oracles),
    ("perplexity of a uniform model", uniform_perplexity),
    ("degendering (f0 m0 vs f1 m1 >= 5x)", degendering),
    ("style bucket replacement rate (75% +/- 2%)", bucket_rate),
    ("toxicity ratio arithmetic", toxicity_arithmetic),
    ("style-conditioned toxicity ordering", toxicity_ordering),
    ("padding invariance", padding_invariance),
    ("decoder causality", causality),
    ("checkpoint roundtrip bit-identical", checkpoint_roundtrip),
    ("seeded-run determinism", seeded_determinism),
    ("serve 7-turn session and concurrent isolation", serve_session),
];

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in CRITERIA {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
