use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{word_tokens, Detector, SafetyError};

/// Unigram and bigram presence features of the word tokens.
fn features(text: &str) -> Vec<String> {
    let words = word_tokens(text);
    let mut f: Vec<String> = words.iter().map(|w| format!("u:{w}")).collect();
    f.extend(words.windows(2).map(|p| format!("b:{} {}", p[0], p[1])));
    f.sort();
    f.dedup();
    f
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.5,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// Logistic regression over bag-of-n-gram features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffensiveClassifier {
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl OffensiveClassifier {
    /// Probability that `text` is offensive.
    pub fn score(&self, text: &str) -> f64 {
        let z: f64 = self.bias + features(text).iter().filter_map(|f| self.weights.get(f)).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("classifier serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

impl Detector for OffensiveClassifier {
    fn name(&self) -> &str {
        "classifier"
    }

    fn is_offensive(&self, text: &str) -> bool {
        self.score(text) >= self.threshold
    }
}

/// Trains with per-example SGD in a seeded shuffled order, so identical
/// data and seed give identical weights. `examples` pairs text with
/// "offensive".
pub fn train_offensive_classifier(
    examples: &[(String, bool)],
    cfg: &ClassifierTraining,
) -> Result<OffensiveClassifier, SafetyError> {
    let positives = examples.iter().filter(|e| e.1).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(SafetyError::SingleClass { positives, negatives });
    }
    let mut index = BTreeMap::new();
    let encoded: Vec<(Vec<usize>, f64)> = examples
        .iter()
        .map(|(text, y)| {
            let ids = features(text)
                .into_iter()
                .map(|f| {
                    let next = index.len();
                    *index.entry(f).or_insert(next)
                })
                .collect();
            (ids, if *y { 1.0 } else { 0.0 })
        })
        .collect();
    let mut w = vec![0.0f64; index.len()];
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (ids, y) = &encoded[i];
            let z = bias + ids.iter().map(|&j| w[j]).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let g = p - y;
            bias -= cfg.learning_rate * g;
            for &j in ids {
                w[j] -= cfg.learning_rate * (g + cfg.l2 * w[j]);
            }
        }
    }
    Ok(OffensiveClassifier {
        weights: index.into_iter().map(|(f, j)| (f, w[j])).collect(),
        bias,
        threshold: 0.5,
    })
}
