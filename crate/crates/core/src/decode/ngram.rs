use std::collections::{BTreeSet, HashMap, HashSet};

/// Map from every `(n-1)`-gram in a sequence to the tokens that follow it.
#[derive(Clone, Debug, Default)]
pub struct NgramIndex {
    n: usize,
    next: HashMap<Vec<u32>, HashSet<u32>>,
}

impl NgramIndex {
    pub fn new(tokens: &[u32], n: usize) -> Self {
        assert!(n >= 1, "n-gram order must be positive");
        let mut next: HashMap<Vec<u32>, HashSet<u32>> = HashMap::new();
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                next.entry(w[..n - 1].to_vec()).or_default().insert(w[n - 1]);
            }
        }
        Self { n, next }
    }

    /// Tokens that would complete an indexed n-gram after `history`.
    pub fn followers(&self, history: &[u32]) -> Option<&HashSet<u32>> {
        if history.len() + 1 < self.n {
            return None;
        }
        self.next.get(&history[history.len() + 1 - self.n..])
    }
}

/// Tokens `t` such that the last `n-1` tokens of `hyp` followed by `t` form
/// an n-gram already present in `hyp` or, when given, in `context`.
pub fn find_banned_tokens(hyp: &[u32], context: Option<&[u32]>, n: usize) -> BTreeSet<u32> {
    assert!(n >= 1, "n-gram order must be positive");
    let mut out = BTreeSet::new();
    if hyp.len() + 1 < n {
        return out;
    }
    for idx in std::iter::once(Some(NgramIndex::new(hyp, n)))
        .chain(std::iter::once(context.map(|c| NgramIndex::new(c, n))))
        .flatten()
    {
        if let Some(f) = idx.followers(hyp) {
            out.extend(f.iter().copied());
        }
    }
    out
}

/// True if some n-gram occurs twice in `tokens`.
pub fn has_repeated_ngram(tokens: &[u32], n: usize) -> bool {
    let mut seen = HashSet::new();
    tokens.len() >= n && tokens.windows(n).any(|w| !seen.insert(w))
}

/// True if `a` and `b` share an n-gram.
pub fn shares_ngram(a: &[u32], b: &[u32], n: usize) -> bool {
    if a.len() < n || b.len() < n {
        return false;
    }
    let grams: HashSet<&[u32]> = b.windows(n).collect();
    a.windows(n).any(|w| grams.contains(w))
}
