use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SafetyError;

pub const STYLE_COUNT: usize = 215;
/// SHA-256 of `data/styles.tsv`.
pub const STYLES_SHA256: &str = "79e2b22ec2aada3c674d9e0820b0d3dd1aacfdfe9db87ade3c445b04b8fa7901";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Positive,
    Neutral,
    Negative,
}

impl Bucket {
    /// The coarse conditioning string that replaces a concrete style.
    pub fn replacement(self) -> &'static str {
        match self {
            Bucket::Positive | Bucket::Neutral => "positive/neutral",
            Bucket::Negative => "negative",
        }
    }
}

impl std::str::FromStr for Bucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "positive" => Ok(Bucket::Positive),
            "neutral" => Ok(Bucket::Neutral),
            "negative" => Ok(Bucket::Negative),
            other => Err(format!("unknown bucket `{other}`")),
        }
    }
}

/// The 215 conversational styles and their polarity buckets.
#[derive(Clone, Debug)]
pub struct StyleRegistry {
    styles: Vec<(String, Bucket)>,
    by_name: HashMap<String, usize>,
}

impl StyleRegistry {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../data/styles.tsv")).expect("bundled style registry is valid")
    }

    pub fn load(path: &Path) -> Result<Self, SafetyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Tab-separated `style<TAB>bucket` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, SafetyError> {
        let mut styles = Vec::new();
        let mut by_name = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| SafetyError::Parse {
                file: "style registry",
                line: i + 1,
                detail,
            };
            let (name, bucket) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `style<TAB>bucket`".into()))?;
            let bucket: Bucket = bucket.trim().parse().map_err(err)?;
            let name = name.trim().to_string();
            if by_name.insert(name.to_lowercase(), styles.len()).is_some() {
                return Err(err(format!("duplicate style `{name}`")));
            }
            styles.push((name, bucket));
        }
        if styles.len() != STYLE_COUNT {
            return Err(SafetyError::StyleCount(styles.len()));
        }
        Ok(Self { styles, by_name })
    }

    pub fn len(&self) -> usize {
        self.styles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.styles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Bucket)> {
        self.styles.iter().map(|(n, b)| (n.as_str(), *b))
    }

    /// Case-insensitive lookup.
    pub fn bucket(&self, style: &str) -> Option<Bucket> {
        self.by_name.get(&style.to_lowercase()).map(|&i| self.styles[i].1)
    }

    pub fn in_bucket(&self, bucket: Bucket) -> Vec<&str> {
        self.iter().filter(|(_, b)| *b == bucket).map(|(n, _)| n).collect()
    }

    /// With probability `p_replace` returns the style's bucket string,
    /// otherwise the style itself.
    pub fn bucket_replace(&self, style: &str, p_replace: f64, rng: &mut impl Rng) -> Result<String, SafetyError> {
        let bucket = self
            .bucket(style)
            .ok_or_else(|| SafetyError::UnknownStyle(style.to_string()))?;
        if rng.gen::<f64>() < p_replace {
            Ok(bucket.replacement().to_string())
        } else {
            Ok(style.to_string())
        }
    }

    /// Errors on the first style not in the registry.
    pub fn check_known<'a>(&self, styles: impl IntoIterator<Item = &'a str>) -> Result<(), SafetyError> {
        for s in styles {
            if self.bucket(s).is_none() {
                return Err(SafetyError::UnknownStyle(s.to_string()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_has_215_styles_in_three_buckets() {
        let r = StyleRegistry::builtin();
        assert_eq!(r.len(), 215);
        for b in [Bucket::Positive, Bucket::Neutral, Bucket::Negative] {
            assert!(!r.in_bucket(b).is_empty());
        }
        assert_eq!(r.bucket("Cheerful"), Some(Bucket::Positive));
        assert_eq!(r.bucket("cruel"), Some(Bucket::Negative));
    }

    #[test]
    fn forced_and_disabled_replacement() {
        let r = StyleRegistry::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(r.bucket_replace("Happy", 1.0, &mut rng).unwrap(), "positive/neutral");
        assert_eq!(r.bucket_replace("Angry", 1.0, &mut rng).unwrap(), "negative");
        for _ in 0..100 {
            assert_eq!(r.bucket_replace("Happy", 0.0, &mut rng).unwrap(), "Happy");
        }
        assert!(matches!(
            r.bucket_replace("Grumpy Cat", 0.5, &mut rng),
            Err(SafetyError::UnknownStyle(_))
        ));
    }

    #[test]
    fn replacement_never_crosses_polarity() {
        let r = StyleRegistry::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (style, bucket) in r.iter() {
            for _ in 0..5 {
                let out = r.bucket_replace(style, 0.5, &mut rng).unwrap();
                match bucket {
                    Bucket::Negative => assert_ne!(out, "positive/neutral"),
                    _ => assert_ne!(out, "negative"),
                }
            }
        }
    }

    #[test]
    fn wrong_count_and_bad_bucket_are_rejected() {
        assert!(matches!(StyleRegistry::parse("Happy\tpositive\n"), Err(SafetyError::StyleCount(1))));
        assert!(matches!(
            StyleRegistry::parse("Happy\tjolly\n"),
            Err(SafetyError::Parse { line: 1, .. })
        ));
    }
}
