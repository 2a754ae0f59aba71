//! Helpers shared by the integration tests: small model configs, trained
//! fixtures, independent metric oracles, decode-invariant checks and a
//! minimal HTTP/1.1 client.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use mmb_core::control_safety::{GenderLexicon, StyleRegistry};
use mmb_core::imagefeat::{FeatureKind, ImageBank};
use mmb_core::model::{Fusion, ModelConfig, ModelParams};
use mmb_core::serve::{serve, AppState};
use mmb_core::textdata::{Episode, Vocab};
use mmb_core::train::{train_loop, ControlsConfig, ExampleContext, TrainOptions, TrainOutcome, TrainSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab: usize, fusion: Fusion, kind: FeatureKind) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: vocab,
        max_positions: 64,
        fusion,
        feature_kind: kind,
        dropout: 0.0,
        image_positions: true,
        late_pooled: false,
        ln_eps: 1e-5,
    }
}

pub fn options(max_steps: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        lr: 1e-3,
        warmup_steps: 20,
        max_steps,
        eval_interval: 50,
        patience: 0,
        seed,
        batch_size: 16,
        max_len: 128,
        target_ppl: None,
    }
}

/// Builds examples for `episodes` under `controls` and trains a fresh model.
pub struct Fixture<'a> {
    pub vocab: &'a Vocab,
    pub config: ModelConfig,
    pub images: Option<&'a ImageBank>,
    pub controls: ControlsConfig,
}

impl Fixture<'_> {
    pub fn with_context<R>(&self, f: impl FnOnce(&ExampleContext<'_>) -> R) -> R {
        let registry = StyleRegistry::builtin();
        let lexicon = GenderLexicon::builtin();
        let ctx = ExampleContext {
            vocab: self.vocab,
            fusion: self.config.fusion,
            images: self.images,
            controls: &self.controls,
            registry: &registry,
            lexicon: &lexicon,
        };
        f(&ctx)
    }

    pub fn set(&self, name: &str, episodes: &[Episode], seed: u64) -> TrainSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = self.with_context(|ctx| ctx.build_all(episodes, &mut rng).expect("examples"));
        TrainSet {
            name: name.into(),
            weight: 1.0,
            examples,
        }
    }

    pub fn train(&self, train: &[TrainSet], valid: &[TrainSet], opts: &TrainOptions) -> TrainOutcome {
        let params = ModelParams::init(&self.config, opts.seed).expect("init");
        train_loop(params, train, valid, opts, None).expect("training")
    }
}

// ---------------------------------------------------------------------------
// Metric oracles: deliberately naive, sharing no code with the library.

pub fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn occurrences(tokens: &[String], gram: &[String]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

/// Clipped n-gram matches by linear scans over distinct hypothesis n-grams.
fn clipped_matches(h: &[String], r: &[String], n: usize) -> usize {
    if h.len() < n {
        return 0;
    }
    let mut seen: Vec<&[String]> = Vec::new();
    let mut total = 0;
    for i in 0..=h.len() - n {
        let g = &h[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        total += occurrences(h, g).min(occurrences(r, g));
    }
    total
}

pub fn oracle_f1(hyp: &str, reference: &str) -> f64 {
    let h = oracle_tokens(hyp);
    let r = oracle_tokens(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let common = clipped_matches(&h, &r, 1) as f64;
    if common == 0.0 {
        return 0.0;
    }
    let p = common / h.len() as f64;
    let rc = common / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn oracle_bleu4(hyp: &str, reference: &str) -> f64 {
    let h = oracle_tokens(hyp);
    let r = oracle_tokens(reference);
    if h.is_empty() {
        return 0.0;
    }
    let mut product_log = 0.0;
    for n in 1..=4usize {
        let denom = (h.len() as f64 - n as f64 + 1.0).max(1.0);
        let m = clipped_matches(&h, &r, n) as f64;
        let p = if m == 0.0 { 1e-9 / denom } else { m / denom };
        product_log += p.ln() / 4.0;
    }
    let bp = if h.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / h.len() as f64).exp()
    };
    bp * product_log.exp()
}

fn lcs_memo(a: &[String], b: &[String], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(v) = memo[i][j] {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs_memo(a, b, i + 1, j + 1, memo)
    } else {
        lcs_memo(a, b, i + 1, j, memo).max(lcs_memo(a, b, i, j + 1, memo))
    };
    memo[i][j] = Some(v);
    v
}

pub fn oracle_rouge_l(hyp: &str, reference: &str) -> f64 {
    let h = oracle_tokens(hyp);
    let r = oracle_tokens(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let mut memo = vec![vec![None; r.len()]; h.len()];
    let l = lcs_memo(&h, &r, 0, 0, &mut memo) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
    let beta2 = 1.2f64 * 1.2;
    (1.0 + beta2) * p * rc / (rc + beta2 * p)
}

/// Random sentence over a small vocabulary with case and punctuation noise,
/// so that overlaps are common.
pub fn random_sentence(rng: &mut impl rand::Rng) -> String {
    const WORDS: [&str; 10] = ["the", "cat", "sat", "on", "mat", "a", "dog", "ran", "Red", "big"];
    const PUNCT: [&str; 5] = ["", "", ",", ".", "!"];
    let n = rng.gen_range(0..12);
    (0..n)
        .map(|_| {
            let w = WORDS[rng.gen_range(0..WORDS.len())];
            let w = if rng.gen_bool(0.2) { w.to_uppercase() } else { w.to_string() };
            format!("{w}{}", PUNCT[rng.gen_range(0..PUNCT.len())])
        })
        .collect::<Vec<_>>()
        .join(if rng.gen_bool(0.5) { " " } else { "  " })
}

// ---------------------------------------------------------------------------
// Decode invariants, checked by brute force.

fn has_repeat(tokens: &[u32], n: usize) -> bool {
    if tokens.len() < n {
        return false;
    }
    for i in 0..=tokens.len() - n {
        for j in i + 1..=tokens.len() - n {
            if tokens[i..i + n] == tokens[j..j + n] {
                return true;
            }
        }
    }
    false
}

fn shares(a: &[u32], b: &[u32], n: usize) -> bool {
    if a.len() < n || b.len() < n {
        return false;
    }
    (0..=a.len() - n).any(|i| (0..=b.len() - n).any(|j| a[i..i + n] == b[j..j + n]))
}

/// Checks repeat blocking, context blocking and minimum length for one
/// generation (`tokens` without `eos`).
pub fn check_decode_invariants(tokens: &[u32], context: &[u32], min_length: usize, n: usize) -> Result<(), String> {
    if tokens.len() < min_length {
        return Err(format!("length {} below min_length {min_length}", tokens.len()));
    }
    if has_repeat(tokens, n) {
        return Err(format!("repeated {n}-gram in {tokens:?}"));
    }
    if shares(tokens, context, n) {
        return Err(format!("{n}-gram shared with context in {tokens:?}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// HTTP.

/// Starts the chat service on an ephemeral port in a background thread.
pub fn spawn_server(state: Arc<AppState>) -> SocketAddr {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
    listener.set_nonblocking(true).expect("nonblocking");
    let addr = listener.local_addr().expect("addr");
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            serve(listener, state).await.expect("serve");
        });
    });
    addr
}

/// One request over a fresh connection. Returns the status code and the
/// body parsed as JSON (`Null` when the body is not JSON).
pub fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, serde_json::Value) {
    let (status, bytes) = http_raw(addr, method, path, body);
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

pub fn http_raw(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, Vec<u8>) {
    let mut stream = TcpStream::connect(addr).expect("connect");
    let body = body.unwrap_or("");
    let request = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(request.as_bytes()).expect("write");
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).expect("read");
    let split = raw.windows(4).position(|w| w == b"\r\n\r\n").expect("header end");
    let head = String::from_utf8_lossy(&raw[..split]).to_string();
    let status: u16 = head
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .expect("status line");
    let mut payload = raw[split + 4..].to_vec();
    if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        payload = dechunk(&payload);
    }
    (status, payload)
}

fn dechunk(mut data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    loop {
        let Some(eol) = data.windows(2).position(|w| w == b"\r\n") else {
            return out;
        };
        let size = usize::from_str_radix(String::from_utf8_lossy(&data[..eol]).trim(), 16).unwrap_or(0);
        if size == 0 {
            return out;
        }
        out.extend_from_slice(&data[eol + 2..eol + 2 + size]);
        data = &data[eol + 2 + size + 2..];
    }
}
