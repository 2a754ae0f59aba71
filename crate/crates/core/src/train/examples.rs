use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::control_safety::{classify_gender, GenderLexicon, StyleRegistry};
use crate::imagefeat::ImageBank;
use crate::model::Fusion;
use crate::textdata::{ControlSettings, Episode, Example, Vocab};

/// Conditioning switches applied when episodes become examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsConfig {
    /// Append the label's gender control string (`"f0 m1"` etc.).
    pub degender: bool,
    /// Probability of replacing a style with its bucket string; 0 disables.
    pub bucket_p_replace: f64,
    /// Drop image features from every example.
    pub no_image: bool,
    /// Include knowledge lines.
    pub include_knowledge: bool,
    /// Emit a style line for episodes that have a style.
    pub style_line: bool,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        Self {
            degender: false,
            bucket_p_replace: 0.0,
            no_image: false,
            include_knowledge: false,
            style_line: true,
        }
    }
}

impl ControlsConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.bucket_p_replace) {
            return Err(TrainError::Config(format!(
                "bucket_p_replace {} outside [0, 1]",
                self.bucket_p_replace
            )));
        }
        Ok(())
    }
}

/// Shared inputs for turning episodes into examples.
pub struct ExampleContext<'a> {
    pub vocab: &'a Vocab,
    pub fusion: Fusion,
    pub images: Option<&'a ImageBank>,
    pub controls: &'a ControlsConfig,
    pub registry: &'a StyleRegistry,
    pub lexicon: &'a GenderLexicon,
}

impl ExampleContext<'_> {
    /// Resolves the style line for one episode, drawing bucket replacement
    /// from `rng`.
    fn style(&self, ep: &Episode, rng: &mut impl Rng) -> Result<Option<String>, TrainError> {
        let Some(style) = ep.style.as_deref().filter(|_| self.controls.style_line) else {
            return Ok(None);
        };
        if self.controls.bucket_p_replace > 0.0 {
            Ok(Some(self.registry.bucket_replace(style, self.controls.bucket_p_replace, rng)?))
        } else {
            Ok(Some(style.to_string()))
        }
    }

    /// Builds one example with training-time conditioning: the gender
    /// string comes from the label itself.
    pub fn build(&self, ep: &Episode, rng: &mut impl Rng) -> Result<Example, TrainError> {
        let gender = self
            .controls
            .degender
            .then(|| classify_gender(&ep.label, self.lexicon).control());
        let settings = ControlSettings {
            style: self.style(ep, rng)?,
            gender,
            include_knowledge: self.controls.include_knowledge,
        };
        self.build_with(ep, &settings)
    }

    /// Builds one example with explicit conditioning, as at inference.
    pub fn build_with(&self, ep: &Episode, settings: &ControlSettings) -> Result<Example, TrainError> {
        let ex = Example::from_episode(ep, self.vocab, settings);
        Ok(ex.with_image(self.image_for(ep)?))
    }

    fn image_for(&self, ep: &Episode) -> Result<Option<std::sync::Arc<crate::imagefeat::ImageFeatures>>, TrainError> {
        let Some(id) = &ep.image_ref else {
            return Ok(None);
        };
        if self.fusion == Fusion::None || self.controls.no_image {
            return Ok(None);
        }
        self.images
            .and_then(|bank| bank.get(id))
            .cloned()
            .map(Some)
            .ok_or_else(|| TrainError::MissingFeatures {
                dataset: ep.dataset_role.to_string(),
                image_id: id.clone(),
            })
    }

    pub fn build_all(&self, episodes: &[Episode], rng: &mut impl Rng) -> Result<Vec<Example>, TrainError> {
        episodes.iter().map(|ep| self.build(ep, rng)).collect()
    }
}
