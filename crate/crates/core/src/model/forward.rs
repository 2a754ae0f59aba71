use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Attn, Ffn, Norm, ParamId};
use super::{Fusion, ModelError, ModelParams};
use crate::imagefeat::project;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::textdata::{Batch, ImageBatch, PAD_ID};

type Result<T> = std::result::Result<T, ModelError>;

/// Token ids `[B, S]` with their mask and optional image features.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [u32],
    pub mask: &'a [bool],
    pub batch: usize,
    pub len: usize,
    pub image: Option<&'a ImageBatch>,
}

impl<'a> EncoderInput<'a> {
    pub fn from_batch(b: &'a Batch) -> Self {
        Self {
            ids: &b.input_ids,
            mask: &b.input_mask,
            batch: b.batch_size,
            len: b.input_len,
            image: b.image.as_ref(),
        }
    }
}

/// Encoder output `[B, M, d]` and which of the `M` positions are real.
pub struct Encoded<'g, T: Real> {
    pub memory: Var<'g, T>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

/// Training-time dropout on embeddings and residual branches. `off()` is the
/// evaluation mode.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    fn apply<'g, T: Real>(&mut self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let scale = T::of(1.0 / keep);
                let n: usize = x.shape().iter().product();
                let mask: Vec<T> = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                    .collect();
                Ok(x.mul_const(Arc::new(mask))?)
            }
            _ => Ok(x),
        }
    }
}

fn pv<'g, T: Real>(g: &'g Graph<T>, p: &ModelParams<T>, id: ParamId) -> Var<'g, T> {
    g.param(id, p.get(id))
}

fn norm<'g, T: Real>(g: &'g Graph<T>, p: &ModelParams<T>, x: Var<'g, T>, n: &Norm) -> Result<Var<'g, T>> {
    Ok(x.layer_norm(pv(g, p, n.g), pv(g, p, n.b), T::of(p.config.ln_eps))?)
}

fn linear<'g, T: Real>(
    g: &'g Graph<T>,
    p: &ModelParams<T>,
    x: Var<'g, T>,
    w: ParamId,
    b: ParamId,
) -> Result<Var<'g, T>> {
    Ok(x.matmul(pv(g, p, w))?.add_broadcast(pv(g, p, b))?)
}

fn ffn<'g, T: Real>(g: &'g Graph<T>, p: &ModelParams<T>, x: Var<'g, T>, f: &Ffn) -> Result<Var<'g, T>> {
    let h = linear(g, p, x, f.w1, f.b1)?.gelu()?;
    linear(g, p, h, f.w2, f.b2)
}

/// Scaled dot-product attention over already split heads, followed by the
/// output projection.
fn attend<'g, T: Real>(
    g: &'g Graph<T>,
    p: &ModelParams<T>,
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    keep: &[bool],
    a: &Attn,
) -> Result<Var<'g, T>> {
    let h = p.config.n_heads;
    let scale = T::of(1.0 / (p.config.head_dim() as f64).sqrt());
    let w = q.bmm(k, true)?.scale(scale)?.masked_softmax(keep, h)?;
    let ctx = w.bmm(v, false)?.merge_heads(h)?;
    linear(g, p, ctx, a.o_w, a.o_b)
}

fn attention<'g, T: Real>(
    g: &'g Graph<T>,
    p: &ModelParams<T>,
    xq: Var<'g, T>,
    xkv: Var<'g, T>,
    keep: &[bool],
    a: &Attn,
) -> Result<Var<'g, T>> {
    let h = p.config.n_heads;
    let q = linear(g, p, xq, a.q_w, a.q_b)?.split_heads(h)?;
    let k = linear(g, p, xkv, a.k_w, a.k_b)?.split_heads(h)?;
    let v = linear(g, p, xkv, a.v_w, a.v_b)?.split_heads(h)?;
    attend(g, p, q, k, v, keep, a)
}

/// `[B, Lq, Lk]` mask from per-key validity `[B, Lk]`, optionally causal.
fn key_mask(keys: &[bool], batch: usize, lq: usize, causal: bool) -> Vec<bool> {
    let lk = keys.len() / batch;
    let mut out = Vec::with_capacity(batch * lq * lk);
    for b in 0..batch {
        for i in 0..lq {
            for j in 0..lk {
                out.push(keys[b * lk + j] && (!causal || j <= i));
            }
        }
    }
    out
}

fn positions(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

fn segment<'g, T: Real>(g: &'g Graph<T>, p: &ModelParams<T>, which: u32) -> Result<Var<'g, T>> {
    let d = p.config.d_model;
    Ok(pv(g, p, p.layout.seg_emb).embedding(&[which], &[1])?.reshape(&[d])?)
}

/// Runs the encoder. Early fusion prepends projected image rows to the
/// text; late fusion appends them to the encoded text; `Fusion::None` and
/// batches without features encode text alone.
pub fn encode<'g, T: Real>(
    g: &'g Graph<T>,
    p: &ModelParams<T>,
    input: &EncoderInput<'_>,
    drop: &mut Dropout<'_>,
) -> Result<Encoded<'g, T>> {
    let cfg = &p.config;
    let lay = &p.layout;
    let (b, s) = (input.batch, input.len);
    if input.ids.len() != b * s || input.mask.len() != b * s {
        return Err(ModelError::Config(format!(
            "encoder input of {} ids / {} mask entries for [{b}, {s}]",
            input.ids.len(),
            input.mask.len()
        )));
    }
    if s > cfg.max_positions {
        return Err(ModelError::TooLong {
            len: s,
            max: cfg.max_positions,
        });
    }
    let image = match (cfg.fusion, input.image) {
        (Fusion::None, _) | (_, None) => None,
        (_, Some(img)) => {
            if img.kind != cfg.feature_kind {
                return Err(ModelError::KindMismatch {
                    expected: cfg.feature_kind,
                    actual: img.kind,
                });
            }
            if img.present.len() != b {
                return Err(ModelError::Config(format!(
                    "image batch of {} for {b} examples",
                    img.present.len()
                )));
            }
            Some(img)
        }
    };
    let projected = |img: &ImageBatch| -> Result<Var<'g, T>> {
        let ip = lay.image.as_ref().expect("image params exist when fusion is on");
        let feats = g.constant(img.features.cast::<T>());
        Ok(project(feats, pv(g, p, ip.proj_w), pv(g, p, ip.proj_b))?)
    };
    let rows_mask = |img: &ImageBatch, rows: usize, out: &mut Vec<bool>, bi: usize| {
        out.extend(std::iter::repeat_n(img.present[bi], rows));
    };

    let text = pv(g, p, lay.tok_emb)
        .embedding(input.ids, &[b, s])?
        .add_broadcast(pv(g, p, lay.pos_emb).embedding(&positions(s), &[s])?)?
        .add_broadcast(segment(g, p, 0)?)?;

    let (mut x, mask) = match (cfg.fusion, image) {
        (Fusion::Early, Some(img)) => {
            let r = img.rows();
            let mut rows = projected(img)?;
            if let Some(pos) = lay.image.as_ref().and_then(|i| i.pos) {
                rows = rows.add_broadcast(pv(g, p, pos).embedding(&positions(r), &[r])?)?;
            }
            rows = rows.add_broadcast(segment(g, p, 1)?)?;
            let mut mask = Vec::with_capacity(b * (r + s));
            for bi in 0..b {
                rows_mask(img, r, &mut mask, bi);
                mask.extend_from_slice(&input.mask[bi * s..(bi + 1) * s]);
            }
            (rows.concat_seq(text)?, mask)
        }
        _ => (text, input.mask.to_vec()),
    };
    x = drop.apply(x)?;
    let len = mask.len() / b;
    let keep = key_mask(&mask, b, len, false);
    for l in &lay.enc {
        let h = norm(g, p, x, &l.ln1)?;
        x = x.add(drop.apply(attention(g, p, h, h, &keep, &l.attn)?)?)?;
        let h = norm(g, p, x, &l.ln2)?;
        x = x.add(drop.apply(ffn(g, p, h, &l.ffn)?)?)?;
    }
    x = norm(g, p, x, &lay.enc_ln)?;

    if let (Fusion::Late, Some(img)) = (cfg.fusion, image) {
        let mut rows = projected(img)?;
        if cfg.late_pooled {
            rows = rows.mean_seq()?;
        }
        let r = rows.shape()[1];
        let mut late_mask = Vec::with_capacity(b * (s + r));
        for bi in 0..b {
            late_mask.extend_from_slice(&mask[bi * s..(bi + 1) * s]);
            rows_mask(img, r, &mut late_mask, bi);
        }
        return Ok(Encoded {
            memory: x.concat_seq(rows)?,
            mask: late_mask,
            batch: b,
            len: s + r,
        });
    }
    Ok(Encoded {
        memory: x,
        mask,
        batch: b,
        len,
    })
}

/// Teacher-forced decoder over `dec_ids` (`[B, T]`, starting with `bos`).
/// Returns logits `[B, T, V]` from the tied output projection.
pub fn decode<'g, T: Real>(
    g: &'g Graph<T>,
    p: &ModelParams<T>,
    enc: &Encoded<'g, T>,
    dec_ids: &[u32],
    t: usize,
    drop: &mut Dropout<'_>,
) -> Result<Var<'g, T>> {
    let lay = &p.layout;
    let b = enc.batch;
    if dec_ids.len() != b * t || t == 0 {
        return Err(ModelError::Config(format!("{} decoder ids for [{b}, {t}]", dec_ids.len())));
    }
    if t > p.config.max_positions {
        return Err(ModelError::TooLong {
            len: t,
            max: p.config.max_positions,
        });
    }
    let tok = pv(g, p, lay.tok_emb);
    let mut y = tok
        .embedding(dec_ids, &[b, t])?
        .add_broadcast(pv(g, p, lay.pos_emb).embedding(&positions(t), &[t])?)?;
    y = drop.apply(y)?;
    let causal = key_mask(&vec![true; b * t], b, t, true);
    let cross = key_mask(&enc.mask, b, t, false);
    for l in &lay.dec {
        let h = norm(g, p, y, &l.ln1)?;
        y = y.add(drop.apply(attention(g, p, h, h, &causal, &l.self_attn)?)?)?;
        let h = norm(g, p, y, &l.ln2)?;
        y = y.add(drop.apply(attention(g, p, h, enc.memory, &cross, &l.cross_attn)?)?)?;
        let h = norm(g, p, y, &l.ln3)?;
        y = y.add(drop.apply(ffn(g, p, h, &l.ffn)?)?)?;
    }
    y = norm(g, p, y, &lay.dec_ln)?;
    Ok(y.matmul_t(tok)?)
}

/// Mean token cross-entropy of the batch targets and the number of
/// supervised tokens.
pub fn forward_loss<'g, T: Real>(
    g: &'g Graph<T>,
    p: &ModelParams<T>,
    batch: &Batch,
    drop: &mut Dropout<'_>,
) -> Result<(Var<'g, T>, usize)> {
    let enc = encode(g, p, &EncoderInput::from_batch(batch), drop)?;
    let tl = batch.target_len;
    let t = tl - 1;
    let mut dec_in = Vec::with_capacity(batch.batch_size * t);
    let mut targets = Vec::with_capacity(batch.batch_size * t);
    for r in 0..batch.batch_size {
        let ids = &batch.target_ids[r * tl..(r + 1) * tl];
        let mask = &batch.target_mask[r * tl..(r + 1) * tl];
        dec_in.extend_from_slice(&ids[..t]);
        targets.extend((1..tl).map(|i| if mask[i] { ids[i] } else { PAD_ID }));
    }
    let logits = decode(g, p, &enc, &dec_in, t, drop)?;
    Ok(logits.cross_entropy(&targets, PAD_ID)?)
}

/// Encoder output as plain values, for decoding.
pub fn encode_tensor<T: Real>(p: &ModelParams<T>, input: &EncoderInput<'_>) -> Result<(Tensor<T>, Vec<bool>)> {
    let g = Graph::<T>::inference();
    let enc = encode(&g, p, input, &mut Dropout::off())?;
    Ok((enc.memory.value(), enc.mask))
}

/// Next-token logits `[B, V]` after each prefix, recomputing the whole
/// decoder. `prefixes` is `[B, L]` and starts with `bos`.
pub fn decode_step<T: Real>(
    p: &ModelParams<T>,
    memory: &Tensor<T>,
    memory_mask: &[bool],
    prefixes: &[u32],
    batch: usize,
) -> Result<Tensor<T>> {
    let g = Graph::<T>::inference();
    let enc = Encoded {
        memory: g.constant(memory.clone()),
        mask: memory_mask.to_vec(),
        batch,
        len: memory.shape()[1],
    };
    let l = prefixes.len() / batch.max(1);
    let logits = decode(&g, p, &enc, prefixes, l, &mut Dropout::off())?.value();
    let v = p.config.vocab_size;
    let mut out = Vec::with_capacity(batch * v);
    for b in 0..batch {
        let row = (b * l + l - 1) * v;
        out.extend_from_slice(&logits.data()[row..row + v]);
    }
    Ok(Tensor::new(vec![batch, v], out)?)
}

/// Rows of `t` regrouped by `parents`, where each batch element owns
/// `group` consecutive leading rows.
fn gather<T: Real>(t: &Tensor<T>, parents: &[usize], group: usize) -> Result<Tensor<T>> {
    let lead = t.shape()[0];
    let block = t.len() / lead * group;
    let old_batch = lead / group;
    let mut data = Vec::with_capacity(parents.len() * block);
    for &par in parents {
        if par >= old_batch {
            return Err(ModelError::Config(format!("parent {par} out of range for {old_batch}")));
        }
        data.extend_from_slice(&t.data()[par * block..(par + 1) * block]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = parents.len() * group;
    Ok(Tensor::new(shape, data)?)
}

/// Incremental decoder with cached keys and values. Each [`step`] feeds one
/// token per batch element and returns the next-token logits; [`reorder`]
/// follows beam-search parent pointers.
///
/// [`step`]: DecoderState::step
/// [`reorder`]: DecoderState::reorder
#[derive(Clone, Debug)]
pub struct DecoderState<T: Real> {
    batch: usize,
    steps: usize,
    memory_mask: Vec<bool>,
    cross: Vec<(Tensor<T>, Tensor<T>)>,
    cache: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> DecoderState<T> {
    pub fn new(p: &ModelParams<T>, memory: &Tensor<T>, memory_mask: &[bool]) -> Result<Self> {
        let g = Graph::<T>::inference();
        let mem = g.constant(memory.clone());
        let h = p.config.n_heads;
        let mut cross = Vec::with_capacity(p.layout.dec.len());
        for l in &p.layout.dec {
            let a = &l.cross_attn;
            let k = linear(&g, p, mem, a.k_w, a.k_b)?.split_heads(h)?.value();
            let v = linear(&g, p, mem, a.v_w, a.v_b)?.split_heads(h)?.value();
            cross.push((k, v));
        }
        Ok(Self {
            batch: memory.shape()[0],
            steps: 0,
            memory_mask: memory_mask.to_vec(),
            cross,
            cache: vec![None; p.layout.dec.len()],
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Tokens consumed so far per element.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Element `i` of the new batch continues element `parents[i]`.
    pub fn reorder(&mut self, parents: &[usize], heads: usize) -> Result<()> {
        let mlen = self.memory_mask.len() / self.batch;
        let mut mask = Vec::with_capacity(parents.len() * mlen);
        for &par in parents {
            if par >= self.batch {
                return Err(ModelError::Config(format!("parent {par} out of range for {}", self.batch)));
            }
            mask.extend_from_slice(&self.memory_mask[par * mlen..(par + 1) * mlen]);
        }
        for (k, v) in &mut self.cross {
            *k = gather(k, parents, heads)?;
            *v = gather(v, parents, heads)?;
        }
        for (k, v) in self.cache.iter_mut().flatten() {
            *k = gather(k, parents, heads)?;
            *v = gather(v, parents, heads)?;
        }
        self.memory_mask = mask;
        self.batch = parents.len();
        Ok(())
    }

    /// Feeds one token per element; returns logits `[B, V]`.
    pub fn step(&mut self, p: &ModelParams<T>, tokens: &[u32]) -> Result<Tensor<T>> {
        let b = self.batch;
        if tokens.len() != b {
            return Err(ModelError::Config(format!("{} tokens for batch {b}", tokens.len())));
        }
        if self.steps >= p.config.max_positions {
            return Err(ModelError::TooLong {
                len: self.steps + 1,
                max: p.config.max_positions,
            });
        }
        let lay = &p.layout;
        let h = p.config.n_heads;
        let g = Graph::<T>::inference();
        let tok = pv(&g, p, lay.tok_emb);
        let pos = vec![self.steps as u32; b];
        let mut y = tok
            .embedding(tokens, &[b, 1])?
            .add(pv(&g, p, lay.pos_emb).embedding(&pos, &[b, 1])?)?;
        let self_keep = vec![true; b * (self.steps + 1)];
        let cross_keep = self.memory_mask.clone();
        for (i, l) in lay.dec.iter().enumerate() {
            let a = &l.self_attn;
            let x = norm(&g, p, y, &l.ln1)?;
            let q = linear(&g, p, x, a.q_w, a.q_b)?.split_heads(h)?;
            let mut k = linear(&g, p, x, a.k_w, a.k_b)?.split_heads(h)?;
            let mut v = linear(&g, p, x, a.v_w, a.v_b)?.split_heads(h)?;
            if let Some((ck, cv)) = self.cache[i].take() {
                k = g.constant(ck).concat_seq(k)?;
                v = g.constant(cv).concat_seq(v)?;
            }
            y = y.add(attend(&g, p, q, k, v, &self_keep, a)?)?;
            self.cache[i] = Some((k.value(), v.value()));

            let a = &l.cross_attn;
            let x = norm(&g, p, y, &l.ln2)?;
            let q = linear(&g, p, x, a.q_w, a.q_b)?.split_heads(h)?;
            let (ck, cv) = &self.cross[i];
            let k = g.constant(ck.clone());
            let v = g.constant(cv.clone());
            y = y.add(attend(&g, p, q, k, v, &cross_keep, a)?)?;

            let x = norm(&g, p, y, &l.ln3)?;
            y = y.add(ffn(&g, p, x, &l.ffn)?)?;
        }
        y = norm(&g, p, y, &lay.dec_ln)?;
        let logits = y.matmul_t(tok)?.value();
        self.steps += 1;
        Ok(logits.reshape(&[b, p.config.vocab_size])?)
    }
}
