use std::collections::HashSet;
use std::path::Path;

use super::{word_tokens, SafetyError};

/// SHA-256 of `data/gender_lexicon.tsv`.
pub const GENDER_LEXICON_SHA256: &str = "6ceaea9b1f3269e500274e5fd41782b215d2e63825ded4fb6d23c8131bfe01f2";

#[derive(Clone, Debug)]
pub struct GenderLexicon {
    female: HashSet<String>,
    male: HashSet<String>,
}

impl GenderLexicon {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../data/gender_lexicon.tsv")).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self, SafetyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `word<TAB>f` or `word<TAB>m` per line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, SafetyError> {
        let mut female = HashSet::new();
        let mut male = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| SafetyError::Parse {
                file: "gender lexicon",
                line: i + 1,
                detail,
            };
            let (word, tag) = line.split_once('\t').ok_or_else(|| err("expected `word<TAB>f|m`".into()))?;
            let word = word.trim().to_lowercase();
            if word_tokens(&word) != [word.clone()] {
                return Err(err(format!("`{word}` is not a single word")));
            }
            match tag.trim() {
                "f" => female.insert(word),
                "m" => male.insert(word),
                other => return Err(err(format!("unknown tag `{other}`"))),
            };
        }
        Self::from_sets(female, male)
    }

    pub fn from_sets(female: HashSet<String>, male: HashSet<String>) -> Result<Self, SafetyError> {
        if female.is_empty() || male.is_empty() {
            return Err(SafetyError::Lexicon("both word sets must be non-empty".into()));
        }
        if let Some(w) = female.intersection(&male).next() {
            return Err(SafetyError::Lexicon(format!("`{w}` is listed as both female and male")));
        }
        Ok(Self { female, male })
    }

    pub fn is_female(&self, word: &str) -> bool {
        self.female.contains(word)
    }

    pub fn is_male(&self, word: &str) -> bool {
        self.male.contains(word)
    }

    pub fn female_words(&self) -> impl Iterator<Item = &str> {
        self.female.iter().map(String::as_str)
    }

    pub fn male_words(&self) -> impl Iterator<Item = &str> {
        self.male.iter().map(String::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GenderFlags {
    pub female: bool,
    pub male: bool,
}

impl GenderFlags {
    /// `"f{0|1} m{0|1}"`.
    pub fn control(self) -> String {
        format!("f{} m{}", self.female as u8, self.male as u8)
    }
}

pub fn classify_gender(text: &str, lex: &GenderLexicon) -> GenderFlags {
    let mut flags = GenderFlags::default();
    for w in word_tokens(text) {
        flags.female |= lex.is_female(&w);
        flags.male |= lex.is_male(&w);
    }
    flags
}
