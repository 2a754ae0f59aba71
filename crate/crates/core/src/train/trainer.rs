use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::eval_metrics::corpus_nll;
use crate::model::{forward_loss, Dropout, ModelParams};
use crate::numerics::{Adam, AdamConfig, Graph, NumericsError};
use crate::textdata::{make_batch, DatasetSpec, Example, MultitaskSampler};

/// Examples of one dataset with its mixing weight.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub name: String,
    pub weight: f64,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub lr: f64,
    pub warmup_steps: u64,
    pub max_steps: usize,
    pub eval_interval: usize,
    /// Non-improving evaluations tolerated before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub max_len: usize,
    /// Stop as soon as validation perplexity reaches this value.
    pub target_ppl: Option<f64>,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.eval_interval == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(TrainError::Config(
                "eval_interval, batch_size and max_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One JSONL log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_ppl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStopped,
    TargetReached,
    /// Training loss or a gradient became non-finite at `step`.
    Diverged { step: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best validated parameters; without validation data, the final ones.
    /// After divergence, the last parameters known to be finite.
    pub best: ModelParams<f32>,
    pub best_step: usize,
    pub best_val_ppl: Option<f64>,
    pub steps: usize,
    /// Validation perplexity at step 0, then every `eval_interval` steps.
    pub evals: Vec<EvalPoint>,
    pub log: Vec<LogRecord>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn initial_val_ppl(&self) -> Option<f64> {
        self.evals.first().filter(|e| e.step == 0).map(|e| e.val_ppl)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().filter_map(|r| r.loss).collect()
    }
}

/// Validation perplexity of a mix: `exp(Σ w·nll_d/tokens_d / Σ w)`, i.e.
/// per-dataset mean token NLL weighted like the training mix.
pub fn mix_perplexity(params: &ModelParams<f32>, sets: &[TrainSet], batch_size: usize, max_len: usize) -> Result<f64, TrainError> {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in sets {
        let t = corpus_nll(params, &s.examples, batch_size, max_len)?;
        if t.tokens == 0 {
            return Err(crate::eval_metrics::EvalError::ZeroTokens.into());
        }
        num += s.weight * t.nll / t.tokens as f64;
        den += s.weight;
    }
    Ok((num / den).exp())
}

struct Tracker {
    best: ModelParams<f32>,
    best_step: usize,
    best_ppl: Option<f64>,
    bad_evals: usize,
    evals: Vec<EvalPoint>,
}

struct Logger<'a> {
    sink: Option<&'a mut dyn Write>,
    records: Vec<LogRecord>,
}

impl Logger<'_> {
    fn emit(&mut self, rec: LogRecord) -> Result<(), TrainError> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut **w, &rec)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }
}

/// Validates, logs, and updates the best snapshot. Returns the stop reason
/// this evaluation triggers, if any.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    params: &ModelParams<f32>,
    valid: &[TrainSet],
    opts: &TrainOptions,
    step: usize,
    lr: f64,
    loss: Option<f64>,
    tracker: &mut Tracker,
    log: &mut Logger<'_>,
) -> Result<Option<StopReason>, TrainError> {
    let ppl = match mix_perplexity(params, valid, opts.batch_size, opts.max_len) {
        Ok(ppl) => ppl,
        Err(e) if e.is_non_finite() => f64::NAN,
        Err(e) => return Err(e),
    };
    log.emit(LogRecord {
        step,
        loss,
        lr,
        val_ppl: Some(ppl),
    })?;
    if !ppl.is_finite() {
        return Ok(Some(StopReason::Diverged { step }));
    }
    tracker.evals.push(EvalPoint { step, val_ppl: ppl });
    if tracker.best_ppl.is_none_or(|b| ppl < b) {
        tracker.best = params.clone();
        tracker.best_step = step;
        tracker.best_ppl = Some(ppl);
        tracker.bad_evals = 0;
    } else {
        tracker.bad_evals += 1;
    }
    if opts.target_ppl.is_some_and(|t| ppl <= t) {
        return Ok(Some(StopReason::TargetReached));
    }
    if opts.patience > 0 && tracker.bad_evals >= opts.patience {
        return Ok(Some(StopReason::EarlyStopped));
    }
    Ok(None)
}

/// Sample → batch → loss → backward → Adam, with periodic validation and
/// early stopping on strict improvement. Log lines are also written to
/// `sink` as they are produced.
pub fn train_loop(
    mut params: ModelParams<f32>,
    train: &[TrainSet],
    valid: &[TrainSet],
    opts: &TrainOptions,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    opts.validate()?;
    let specs: Vec<DatasetSpec> = train
        .iter()
        .map(|s| DatasetSpec {
            name: s.name.clone(),
            size: s.examples.len(),
            weight: s.weight,
        })
        .collect();
    let mut sampler = MultitaskSampler::new(&specs, opts.seed)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x9e37_79b9));
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: opts.lr,
        warmup_steps: opts.warmup_steps,
        ..AdamConfig::default()
    });
    let names = params.names().to_vec();
    let dropout = params.config.dropout;
    let mut log = Logger {
        sink: sink.take(),
        records: Vec::new(),
    };
    let mut tracker = Tracker {
        best: params.clone(),
        best_step: 0,
        best_ppl: None,
        bad_evals: 0,
        evals: Vec::new(),
    };
    let mut stop = StopReason::MaxSteps;
    let mut steps = 0;
    let mut last_finite = params.clone();

    if !valid.is_empty() {
        if let Some(s) = evaluate(&params, valid, opts, 0, 0.0, None, &mut tracker, &mut log)? {
            stop = s;
        }
    }
    if stop == StopReason::MaxSteps {
        for step in 1..=opts.max_steps {
            steps = step;
            let picks: Vec<Example> = (0..opts.batch_size)
                .map(|_| {
                    let (d, e) = sampler.next().expect("endless sampler");
                    train[d].examples[e].clone()
                })
                .collect();
            let batch = make_batch(&picks, opts.max_len)?;
            let g = Graph::<f32>::new();
            let mut drop = if dropout > 0.0 {
                Dropout::train(dropout, &mut drop_rng)
            } else {
                Dropout::off()
            };
            let forward = forward_loss(&g, &params, &batch, &mut drop).map_err(TrainError::from);
            let loss = match forward {
                Ok((loss, _)) if loss.item().is_finite() => loss,
                Ok(_) => {
                    stop = StopReason::Diverged { step };
                    break;
                }
                Err(e) if e.is_non_finite() => {
                    stop = StopReason::Diverged { step };
                    break;
                }
                Err(e) => return Err(e),
            };
            let loss_value = loss.item() as f64;
            let grads = match g.backward(loss) {
                Ok(grads) => grads,
                Err(NumericsError::NonFinite { .. }) => {
                    stop = StopReason::Diverged { step };
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            let per_param: Vec<Option<&[f32]>> = (0..names.len()).map(|i| grads.param(i)).collect();
            last_finite = params.clone();
            let lr = match adam.step(params.tensors_mut(), &per_param, &names) {
                Ok(lr) => lr,
                Err(NumericsError::NonFiniteGradient { .. }) => {
                    stop = StopReason::Diverged { step };
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            let at_eval = step % opts.eval_interval == 0 || step == opts.max_steps;
            if at_eval && !valid.is_empty() {
                if let Some(s) = evaluate(&params, valid, opts, step, lr, Some(loss_value), &mut tracker, &mut log)? {
                    stop = s;
                    break;
                }
            } else {
                log.emit(LogRecord {
                    step,
                    loss: Some(loss_value),
                    lr,
                    val_ppl: None,
                })?;
            }
        }
    }

    let (best, best_step) = match stop {
        StopReason::Diverged { step } if tracker.best_ppl.is_none() => (last_finite, step.saturating_sub(1)),
        _ if valid.is_empty() => (params, steps),
        _ => (tracker.best, tracker.best_step),
    };
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_ppl: tracker.best_ppl,
        steps,
        evals: tracker.evals,
        log: log.records,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagefeat::FeatureKind;
    use crate::model::{Fusion, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 20,
            max_positions: 16,
            fusion: Fusion::None,
            feature_kind: FeatureKind::Global,
            dropout: 0.0,
            image_positions: true,
            late_pooled: false,
            ln_eps: 1e-5,
        }
    }

    fn data() -> Vec<TrainSet> {
        let examples = (0..8u32)
            .map(|i| Example {
                input: vec![11 + i % 4, 12],
                label: vec![11 + (i + 1) % 4, 15 + i % 3],
                image: None,
            })
            .collect();
        vec![TrainSet {
            name: "toy".into(),
            weight: 1.0,
            examples,
        }]
    }

    fn opts() -> TrainOptions {
        TrainOptions {
            lr: 1e-2,
            warmup_steps: 5,
            max_steps: 60,
            eval_interval: 10,
            patience: 0,
            seed: 4,
            batch_size: 4,
            max_len: 16,
            target_ppl: None,
        }
    }

    #[test]
    fn learns_and_keeps_best() {
        let d = data();
        let p = ModelParams::init(&cfg(), 1).unwrap();
        let out = train_loop(p, &d, &d, &opts(), None).unwrap();
        assert_eq!(out.stop, StopReason::MaxSteps);
        assert_eq!(out.evals.len(), 7);
        let first = out.evals[0].val_ppl;
        let best = out.best_val_ppl.unwrap();
        assert!(best < first * 0.7, "{first} -> {best}");
        assert_eq!(best, out.evals.iter().map(|e| e.val_ppl).fold(f64::INFINITY, f64::min));
        let again = mix_perplexity(&out.best, &d, 4, 16).unwrap();
        assert_eq!(again, best);
    }

    #[test]
    fn frozen_lr_stops_after_patience() {
        let d = data();
        let p = ModelParams::init(&cfg(), 1).unwrap();
        let o = TrainOptions {
            lr: 0.0,
            patience: 2,
            max_steps: 1000,
            ..opts()
        };
        let out = train_loop(p.clone(), &d, &d, &o, None).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStopped);
        assert_eq!(out.evals.len(), 3);
        assert_eq!(out.steps, 20);
        assert_eq!(out.best_step, 0);
        assert_eq!(out.best.max_abs_diff(&p), 0.0);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let d = data();
        let p = ModelParams::init(&cfg(), 1).unwrap();
        let a = train_loop(p.clone(), &d, &[], &opts(), None).unwrap();
        let b = train_loop(p, &d, &[], &opts(), None).unwrap();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.best.max_abs_diff(&b.best), 0.0);
        assert_eq!(a.steps, 60);
    }

    #[test]
    fn target_stops_early() {
        let d = data();
        let p = ModelParams::init(&cfg(), 1).unwrap();
        let o = TrainOptions {
            target_ppl: Some(1e9),
            ..opts()
        };
        let out = train_loop(p, &d, &d, &o, None).unwrap();
        assert_eq!(out.stop, StopReason::TargetReached);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let d = data();
        let mut p = ModelParams::<f32>::init(&cfg(), 1).unwrap();
        let idx = p.names().iter().position(|n| n == "dec.ln.g").unwrap();
        p.tensors_mut()[idx].data_mut()[0] = f32::NAN;
        let out = train_loop(p, &d, &[], &opts(), None).unwrap();
        assert_eq!(out.stop, StopReason::Diverged { step: 1 });
        assert_eq!(out.steps, 1);
        assert!(out.log.is_empty());
    }

    #[test]
    fn log_lines_are_jsonl() {
        let d = data();
        let p = ModelParams::init(&cfg(), 1).unwrap();
        let mut buf = Vec::new();
        let out = train_loop(p, &d, &d, &TrainOptions { max_steps: 12, ..opts() }, Some(&mut buf)).unwrap();
        let lines: Vec<LogRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines, out.log);
        assert_eq!(lines.len(), 13);
        assert!(lines[10].val_ppl.is_some() && lines[12].val_ppl.is_some() && lines[5].val_ppl.is_none());
    }
}
