use std::collections::HashMap;
use std::path::Path;

use super::{word_tokens, Detector, SafetyError};

/// SHA-256 of `data/blocklist.txt`.
pub const BLOCKLIST_SHA256: &str = "4d4ea2253fb6fa5f8c4658d5a07103312b31d21f39eaf972d6fe0f2882c0970f";

/// Phrases matched case-insensitively on word boundaries.
#[derive(Clone, Debug, Default)]
pub struct Blocklist {
    phrases: Vec<(String, Vec<String>)>,
    by_first: HashMap<String, Vec<usize>>,
}

impl Blocklist {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../data/blocklist.txt")).expect("bundled blocklist is valid")
    }

    pub fn load(path: &Path) -> Result<Self, SafetyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// One phrase per line; blank lines and `#` comment lines are skipped.
    pub fn parse(text: &str) -> Result<Self, SafetyError> {
        let mut out = Self::default();
        for (i, line) in text.lines().enumerate() {
            let phrase = line.trim();
            if phrase.is_empty() || phrase.starts_with('#') {
                continue;
            }
            let words = word_tokens(phrase);
            if words.is_empty() {
                return Err(SafetyError::Parse {
                    file: "blocklist",
                    line: i + 1,
                    detail: format!("`{phrase}` contains no word characters"),
                });
            }
            out.by_first.entry(words[0].clone()).or_default().push(out.phrases.len());
            out.phrases.push((phrase.to_lowercase(), words));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// Every occurrence of a listed phrase, in text order.
    pub fn matches(&self, text: &str) -> Vec<String> {
        let words = word_tokens(text);
        let mut hits = Vec::new();
        for start in 0..words.len() {
            let Some(cands) = self.by_first.get(&words[start]) else {
                continue;
            };
            for &c in cands {
                let (phrase, pw) = &self.phrases[c];
                if words[start..].starts_with(pw) {
                    hits.push(phrase.clone());
                }
            }
        }
        hits
    }
}

impl Detector for Blocklist {
    fn name(&self) -> &str {
        "blocklist"
    }

    fn is_offensive(&self, text: &str) -> bool {
        !self.matches(text).is_empty()
    }
}
