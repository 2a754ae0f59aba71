//! Byte-level BPE.
//!
//! Ids `0..SPECIAL_TOKENS.len()` are reserved, the next 256 ids are the raw
//! bytes, and learned merges follow. Text is first split into chunks (a
//! whitespace run, or an optional single space followed by non-whitespace)
//! and merges never cross chunk boundaries. A chunk whose word equals one of
//! the control tokens is emitted as that reserved id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TextDataError;

pub const SPECIAL_TOKENS: [&str; 11] = [
    "<pad>",
    "<s>",
    "</s>",
    "<unk>",
    "[style]",
    "positive/neutral",
    "negative",
    "f0",
    "f1",
    "m0",
    "m1",
];

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// First control token; `pad`, `bos`, `eos` and `unk` are never produced
/// from text.
const FIRST_CONTROL: u32 = 4;
pub const NUM_RESERVED: usize = SPECIAL_TOKENS.len();
const BYTE_OFFSET: u32 = NUM_RESERVED as u32;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabRepr {
    specials: Vec<String>,
    merges: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
    controls: HashMap<Vec<u8>, u32>,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            merges: v.merges,
        }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = TextDataError;

    fn try_from(r: VocabRepr) -> Result<Self, TextDataError> {
        if r.specials != SPECIAL_TOKENS {
            return Err(TextDataError::Vocab(format!(
                "reserved token table differs: {:?}",
                r.specials
            )));
        }
        Vocab::from_merges(r.merges)
    }
}

fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Splits bytes into merge-isolated chunks.
pub(crate) fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut chunks = Vec::new();
    let n = bytes.len();
    let mut i = 0;
    while i < n {
        let start;
        if is_ws(bytes[i]) {
            let mut j = i;
            while j < n && is_ws(bytes[j]) {
                j += 1;
            }
            if j < n && bytes[j - 1] == b' ' {
                if j - 1 > i {
                    chunks.push(&bytes[i..j - 1]);
                }
                start = j - 1;
            } else {
                chunks.push(&bytes[i..j]);
                i = j;
                continue;
            }
        } else {
            start = i;
        }
        let mut k = start + 1;
        while k < n && !is_ws(bytes[k]) {
            k += 1;
        }
        chunks.push(&bytes[start..k]);
        i = k;
    }
    chunks
}

impl Vocab {
    /// Byte-only vocabulary (no merges).
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("no merges is always valid")
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, TextDataError> {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_TOKENS
            .iter()
            .map(|s| s.as_bytes().to_vec())
            .collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let len = tokens.len() as u32;
            if a < BYTE_OFFSET || b < BYTE_OFFSET || a >= len || b >= len {
                return Err(TextDataError::Vocab(format!(
                    "merge {rank} references invalid ids ({a}, {b})"
                )));
            }
            let mut t = tokens[a as usize].clone();
            t.extend_from_slice(&tokens[b as usize]);
            tokens.push(t);
            ranks.insert((a, b), rank as u32);
        }
        let controls = (FIRST_CONTROL..BYTE_OFFSET)
            .map(|id| (SPECIAL_TOKENS[id as usize].as_bytes().to_vec(), id))
            .collect();
        Ok(Self {
            merges,
            tokens,
            ranks,
            controls,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_to_id(&self, token: &[u8]) -> Option<u32> {
        if let Some(pos) = SPECIAL_TOKENS.iter().position(|s| s.as_bytes() == token) {
            return Some(pos as u32);
        }
        if token.len() == 1 {
            return Some(BYTE_OFFSET + token[0] as u32);
        }
        self.tokens
            .iter()
            .skip(NUM_RESERVED + 256)
            .position(|t| t == token)
            .map(|p| (p + NUM_RESERVED + 256) as u32)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < NUM_RESERVED
    }

    /// Hex SHA-256 over the reserved table and merge list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in SPECIAL_TOKENS {
            h.update(s.as_bytes());
            h.update([0u8]);
        }
        for &(a, b) in &self.merges {
            h.update(a.to_le_bytes());
            h.update(b.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let (space, word) = match chunk.split_first() {
            Some((b' ', rest)) if !rest.is_empty() => (true, rest),
            _ => (false, chunk),
        };
        if let Some(&id) = self.controls.get(word) {
            if space {
                out.push(BYTE_OFFSET + b' ' as u32);
            }
            out.push(id);
            return;
        }
        let mut ids: Vec<u32> = chunk.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            let Some((rank, a, b)) = best else { break };
            let merged = BYTE_OFFSET + 256 + rank;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in pretokenize(bytes) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Bytes of the given ids; `pad`, `bos` and `eos` contribute nothing.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            if let Some(t) = self.tokens.get(id as usize) {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}

/// Learns merges until the vocabulary (reserved + bytes + merges) reaches
/// `vocab_size` or nothing is left to merge. Among equally frequent pairs
/// the one whose `(left bytes, right bytes)` sorts first wins.
pub fn bpe_train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab, TextDataError> {
    let base = NUM_RESERVED + 256;
    if vocab_size <= base {
        return Err(TextDataError::Vocab(format!(
            "vocab_size must exceed {base} (reserved + bytes), got {vocab_size}"
        )));
    }
    if corpus.iter().all(|l| l.as_ref().is_empty()) {
        return Err(TextDataError::EmptyCorpus);
    }
    let mut vocab = Vocab::bytes_only();
    let mut word_counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for line in corpus {
        for chunk in pretokenize(line.as_ref().as_bytes()) {
            let ids: Vec<u32> = chunk.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
            *word_counts.entry(ids).or_default() += 1;
        }
    }
    // Sorted so that iteration order (and with it tie handling) never
    // depends on hash seeds.
    let mut words: Vec<(Vec<u32>, usize)> = word_counts.into_iter().collect();
    words.sort();

    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((a, b), _)) = best else { break };
        merges.push((a, b));
        let new_id = vocab.len() as u32;
        let mut t = vocab.tokens[a as usize].clone();
        t.extend_from_slice(&vocab.tokens[b as usize]);
        vocab.tokens.push(t);
        for (w, _) in words.iter_mut() {
            if w.len() < 2 {
                continue;
            }
            let mut next = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                    next.push(new_id);
                    i += 2;
                } else {
                    next.push(w[i]);
                    i += 1;
                }
            }
            *w = next;
        }
    }
    Vocab::from_merges(merges)
}
