use std::collections::HashMap;

/// Bumped whenever [`normalize`] changes, since scores depend on it.
pub const NORMALIZER_VERSION: u32 = 1;

/// BLEU floor for n-gram orders with no clipped matches.
pub const BLEU_EPSILON: f64 = 1e-9;

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(hyp: &[String], reference: &[String], n: usize) -> usize {
    let r = counts(reference, n);
    counts(hyp, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Unigram F1 with multiset overlap. Empty inputs score 0.
pub fn f1(hyp: &str, reference: &str) -> f64 {
    let h = normalize(hyp);
    let r = normalize(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let overlap = clipped_overlap(&h, &r, 1);
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / h.len() as f64;
    let rc = overlap as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions times
/// the brevity penalty. An order with no matches contributes
/// `BLEU_EPSILON / max(hyp n-grams, 1)` instead of zero.
pub fn bleu4(hyp: &str, reference: &str) -> f64 {
    let h = normalize(hyp);
    let r = normalize(reference);
    if h.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let total = h.len().saturating_sub(n - 1).max(1) as f64;
        let m = clipped_overlap(&h, &r, n) as f64;
        let p = if m > 0.0 { m / total } else { BLEU_EPSILON / total };
        log_sum += p.ln();
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * (log_sum / 4.0).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weight `ROUGE_BETA`.
pub fn rouge_l(hyp: &str, reference: &str) -> f64 {
    let h = normalize(hyp);
    let r = normalize(reference);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&h, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / h.len() as f64;
    let rc = l / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer() {
        assert_eq!(normalize("  Hello,   World! It's\tME. "), ["hello", "world", "its", "me"]);
        assert!(normalize("?!").is_empty());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1("the cat sat", "The cat, sat!"), 1.0);
        assert_eq!(f1("a b", "c d"), 0.0);
        assert!((f1("a b c", "a b d") - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1("", "a"), 0.0);
        // Multiset: one "a" in the reference only matches once.
        assert!((f1("a a", "a b") - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu4("one two three four five", "one two three four five") - 1.0).abs() < 1e-12);
        let disjoint4 = bleu4("a b c d e", "a b c x d e");
        assert!(disjoint4 < 1e-2, "{disjoint4}");
        assert_eq!(bleu4("", "a b"), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
    }
}
