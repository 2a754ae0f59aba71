use std::cmp::Ordering;

use super::{BeamConfig, DecodeError, Hypothesis, NgramIndex, StepModel};

/// Upper bound on `vocab_size ^ max_length` for [`exhaustive_oracle`].
pub const ORACLE_MAX_SEQUENCES: f64 = 1e7;

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Returned candidates, best first: finished hypotheses, or the live beam
    /// at `max_length` when nothing finished.
    pub ranked: Vec<Hypothesis>,
    /// Steps at which some hypothesis had every token banned and blocking was
    /// relaxed.
    pub fallback_steps: usize,
}

/// Higher score first; equal scores fall back to token order.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Applies the eos rule and the two blocking sets, relaxing context blocking
/// and then generation blocking when nothing survives. Returns the mask and
/// whether a relaxation happened.
fn apply_constraints(
    vocab: usize,
    eos: u32,
    eos_ok: bool,
    gen_banned: impl Fn(u32) -> bool,
    ctx_banned: impl Fn(u32) -> bool,
) -> (Vec<bool>, bool) {
    let eos_rule = |t: u32| t != eos || eos_ok;
    let ids = || 0..vocab as u32;
    let strict: Vec<bool> = ids().map(|t| eos_rule(t) && !gen_banned(t) && !ctx_banned(t)).collect();
    if strict.iter().any(|&a| a) {
        return (strict, false);
    }
    let no_ctx: Vec<bool> = ids().map(|t| eos_rule(t) && !gen_banned(t)).collect();
    if no_ctx.iter().any(|&a| a) {
        return (no_ctx, true);
    }
    let unblocked: Vec<bool> = ids().map(eos_rule).collect();
    if unblocked.iter().any(|&a| a) {
        return (unblocked, true);
    }
    (vec![true; vocab], true)
}

fn check_rows(rows: &[Vec<f64>], want: usize, vocab: usize) -> Result<(), DecodeError> {
    if rows.len() != want || rows.iter().any(|r| r.len() != vocab) {
        return Err(DecodeError::StepShape { got: rows.len(), want });
    }
    Ok(())
}

/// Length-extended beam search over raw cumulative log-probability.
///
/// Candidates are ordered by score, then parent rank, then token id. An
/// `eos` candidate ranked within the top `beam_size` finishes its
/// hypothesis; the best `beam_size` other candidates form the next beam.
/// Search stops once the best finished score is at least the best live
/// score, since extending can only lower a score.
pub fn beam_search<M: StepModel + ?Sized>(
    model: &mut M,
    context: &[u32],
    cfg: &BeamConfig,
) -> Result<BeamOutput, DecodeError> {
    cfg.validate()?;
    let vocab = model.vocab_size();
    let eos = model.eos_id();
    let n = cfg.block_ngram;
    let ctx_index = cfg.block_from_context.then(|| NgramIndex::new(context, n));
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut parents = vec![0];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut fallback_steps = 0;

    for _ in 0..cfg.max_length {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let rows = model.next_log_probs(&prefixes, &parents)?;
        check_rows(&rows, live.len(), vocab)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        let mut relaxed = false;
        for (i, (h, lp)) in live.iter().zip(&rows).enumerate() {
            let own = cfg.block_within_generation.then(|| NgramIndex::new(&h.tokens, n));
            let followers = |idx: &Option<NgramIndex>| idx.as_ref().and_then(|x| x.followers(&h.tokens)).cloned();
            let gen = followers(&own);
            let ctx = followers(&ctx_index);
            let (allowed, fb) = apply_constraints(
                vocab,
                eos,
                h.tokens.len() >= cfg.min_length,
                |t| gen.as_ref().is_some_and(|s| s.contains(&t)),
                |t| ctx.as_ref().is_some_and(|s| s.contains(&t)),
            );
            relaxed |= fb;
            for (t, &ok) in allowed.iter().enumerate() {
                if ok && lp[t] > f64::NEG_INFINITY {
                    cands.push((h.score + lp[t], i, t as u32));
                }
            }
        }
        if relaxed {
            fallback_steps += 1;
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam_size);
        let mut next_parents = Vec::with_capacity(cfg.beam_size);
        for (r, &(score, i, t)) in cands.iter().enumerate() {
            if r >= cfg.beam_size && next.len() >= cfg.beam_size {
                break;
            }
            let mut tokens = live[i].tokens.clone();
            tokens.push(t);
            if t == eos {
                if r < cfg.beam_size {
                    finished.push(Hypothesis {
                        tokens,
                        score,
                        finished: true,
                    });
                }
            } else if next.len() < cfg.beam_size {
                next.push(Hypothesis {
                    tokens,
                    score,
                    finished: false,
                });
                next_parents.push(i);
            }
        }
        live = next;
        parents = next_parents;
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        match live.first() {
            None => break,
            Some(top) if !finished.is_empty() && best_finished >= top.score => break,
            _ => {}
        }
    }

    let mut ranked = if finished.is_empty() { live } else { finished };
    ranked.sort_by(rank);
    let best = ranked.first().cloned().ok_or(DecodeError::NoCandidates)?;
    Ok(BeamOutput {
        best,
        ranked,
        fallback_steps,
    })
}

/// Tokens that follow the last `n-1` tokens of `history` somewhere in `seq`.
fn scan_followers(seq: &[u32], history: &[u32], n: usize) -> Vec<u32> {
    if history.len() + 1 < n || seq.len() < n {
        return Vec::new();
    }
    let tail = &history[history.len() + 1 - n..];
    let mut out = Vec::new();
    for start in 0..=seq.len() - n {
        if &seq[start..start + n - 1] == tail {
            out.push(seq[start + n - 1]);
        }
    }
    out
}

/// Enumerates every sequence under the same constraints as
/// [`beam_search`] and returns the highest-scoring finished one (or the best
/// sequence of `max_length` tokens if none can finish).
pub fn exhaustive_oracle<M: StepModel + ?Sized>(
    model: &mut M,
    context: &[u32],
    cfg: &BeamConfig,
) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    let vocab = model.vocab_size();
    let eos = model.eos_id();
    let size = (vocab as f64).powi(cfg.max_length as i32);
    if size > ORACLE_MAX_SEQUENCES {
        return Err(DecodeError::SearchSpace {
            size,
            bound: ORACLE_MAX_SEQUENCES,
        });
    }
    let n = cfg.block_ngram;
    let mut level: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut parents = vec![0];
    let mut best: Option<Hypothesis> = None;
    let consider = |best: &mut Option<Hypothesis>, h: Hypothesis| {
        if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
            *best = Some(h);
        }
    };
    for _ in 0..cfg.max_length {
        let prefixes: Vec<Vec<u32>> = level.iter().map(|(t, _)| t.clone()).collect();
        let rows = model.next_log_probs(&prefixes, &parents)?;
        check_rows(&rows, level.len(), vocab)?;
        let mut next = Vec::new();
        let mut next_parents = Vec::new();
        for (i, ((tokens, score), lp)) in level.iter().zip(&rows).enumerate() {
            let gen = if cfg.block_within_generation {
                scan_followers(tokens, tokens, n)
            } else {
                Vec::new()
            };
            let ctx = if cfg.block_from_context {
                scan_followers(context, tokens, n)
            } else {
                Vec::new()
            };
            let (allowed, _) = apply_constraints(
                vocab,
                eos,
                tokens.len() >= cfg.min_length,
                |t| gen.contains(&t),
                |t| ctx.contains(&t),
            );
            for t in 0..vocab as u32 {
                if !allowed[t as usize] || lp[t as usize] == f64::NEG_INFINITY {
                    continue;
                }
                let mut ext = tokens.clone();
                ext.push(t);
                let s = score + lp[t as usize];
                if t == eos {
                    consider(
                        &mut best,
                        Hypothesis {
                            tokens: ext,
                            score: s,
                            finished: true,
                        },
                    );
                } else {
                    next.push((ext, s));
                    next_parents.push(i);
                }
            }
        }
        level = next;
        parents = next_parents;
        if level.is_empty() {
            break;
        }
    }
    if best.is_none() {
        for (tokens, score) in level {
            consider(
                &mut best,
                Hypothesis {
                    tokens,
                    score,
                    finished: false,
                },
            );
        }
    }
    best.ok_or(DecodeError::NoCandidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::has_repeated_ngram;

    /// Fixed next-token distribution, independent of the prefix.
    struct Unigram {
        lp: Vec<f64>,
        eos: u32,
    }

    impl StepModel for Unigram {
        fn vocab_size(&self) -> usize {
            self.lp.len()
        }
        fn eos_id(&self) -> u32 {
            self.eos
        }
        fn next_log_probs(&mut self, prefixes: &[Vec<u32>], _: &[usize]) -> Result<Vec<Vec<f64>>, DecodeError> {
            Ok(vec![self.lp.clone(); prefixes.len()])
        }
    }

    fn cfg(beam: usize, min: usize, max: usize) -> BeamConfig {
        BeamConfig {
            beam_size: beam,
            min_length: min,
            max_length: max,
            ..BeamConfig::default()
        }
    }

    #[test]
    fn trigram_blocking_forces_deviation() {
        // Nearly all mass on token 0; eos is token 2.
        let mut m = Unigram {
            lp: vec![(0.97f64).ln(), (0.02f64).ln(), (0.01f64).ln()],
            eos: 2,
        };
        let c = cfg(729, 4, 6);
        let out = beam_search(&mut m, &[], &c).unwrap();
        assert!(!has_repeated_ngram(&out.best.tokens, 3));
        assert_eq!(out.best.tokens[..3], [0, 0, 0]);
        assert_ne!(out.best.tokens[3], 0);
        let oracle = exhaustive_oracle(&mut m, &[], &c).unwrap();
        assert_eq!(out.best.tokens, oracle.tokens);
        assert_eq!(out.fallback_steps, 0);
    }

    #[test]
    fn min_length_holds() {
        let mut m = Unigram {
            lp: vec![(0.05f64).ln(), (0.05f64).ln(), (0.9f64).ln()],
            eos: 2,
        };
        let out = beam_search(&mut m, &[], &cfg(3, 5, 12)).unwrap();
        assert!(out.best.finished);
        assert!(out.best.content().len() >= 5);
    }

    #[test]
    fn single_token_vocab_is_the_only_sequence() {
        let mut m = Unigram { lp: vec![0.0], eos: 0 };
        let c = BeamConfig {
            block_within_generation: false,
            ..cfg(2, 0, 3)
        };
        assert_eq!(exhaustive_oracle(&mut m, &[], &c).unwrap().tokens, vec![0]);
        assert_eq!(beam_search(&mut m, &[], &c).unwrap().best.tokens, vec![0]);
    }

    #[test]
    fn oracle_rejects_huge_spaces() {
        let mut m = Unigram { lp: vec![-1.0; 100], eos: 2 };
        assert!(matches!(
            exhaustive_oracle(&mut m, &[], &cfg(1, 1, 5)),
            Err(DecodeError::SearchSpace { .. })
        ));
    }

    #[test]
    fn fallback_is_counted_when_everything_is_banned() {
        // Vocabulary {0, eos}; min length keeps eos out, so after "0 0" the
        // only token would repeat the trigram "0 0 0".
        let mut m = Unigram {
            lp: vec![(0.5f64).ln(), (0.5f64).ln()],
            eos: 1,
        };
        let out = beam_search(&mut m, &[], &cfg(1, 4, 6)).unwrap();
        assert!(out.fallback_steps > 0);
    }

    #[test]
    fn context_blocking_applies() {
        let mut m = Unigram {
            lp: vec![(0.9f64).ln(), (0.06f64).ln(), (0.04f64).ln()],
            eos: 2,
        };
        let c = cfg(729, 3, 6);
        let out = beam_search(&mut m, &[0, 0, 0], &c).unwrap();
        assert!(!crate::decode::shares_ngram(&out.best.tokens, &[0, 0, 0], 3));
        assert_eq!(out.best.tokens, vec![0, 0, 1, 2]);
        let no_ctx = BeamConfig {
            block_from_context: false,
            ..c
        };
        let free = beam_search(&mut m, &[0, 0, 0], &no_ctx).unwrap();
        assert_eq!(free.best.tokens, vec![0, 0, 0, 2]);
        assert_eq!(free.best.tokens, exhaustive_oracle(&mut m, &[0, 0, 0], &no_ctx).unwrap().tokens);
    }
}
