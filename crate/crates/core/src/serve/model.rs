use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ServeError, Session, Speaker};
use crate::control_safety::{assess, Blocklist, GenderLexicon, OffensiveClassifier, SafetyVerdict, StyleRegistry};
use crate::decode::{generate, BeamConfig};
use crate::imagefeat::{FeatureStore, ImageFeatures};
use crate::model::{load_checkpoint, ModelParams};
use crate::textdata::{ControlSettings, DatasetRole, Episode, Example, Vocab};

/// Everything needed to answer chat requests. Shared read-only between
/// requests.
pub struct ChatModel {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub store: Option<FeatureStore>,
    pub blocklist: Blocklist,
    pub classifier: Option<OffensiveClassifier>,
    pub lexicon: GenderLexicon,
    pub registry: StyleRegistry,
    pub beam: BeamConfig,
    pub defaults: Defaults,
}

/// Conditioning applied when a session does not choose its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    /// Gender control string; `None` omits it.
    pub gender: Option<String>,
    /// Style line for image sessions.
    pub style: Option<String>,
    /// Whether text-only sessions also get the default style line.
    pub style_without_image: bool,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            gender: Some("f0 m0".into()),
            style: Some("positive/neutral".into()),
            style_without_image: false,
        }
    }
}

/// Paths and switches for [`ChatModel::load`].
#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    pub checkpoint: PathBuf,
    pub features: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub beam: BeamConfig,
    pub defaults: Defaults,
}

/// Session-level conditioning requested by the client.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    #[serde(default)]
    pub style: Option<String>,
    #[serde(default)]
    pub gender: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    /// Generated token ids, `eos` excluded.
    pub token_ids: Vec<u32>,
    /// Encoder input ids the reply was conditioned on.
    pub context_ids: Vec<u32>,
    /// Scores of the returned beam candidates, best first.
    pub beam_scores: Vec<f64>,
    pub finished: bool,
    /// Steps where blocking had to be relaxed.
    pub fallback_steps: usize,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
    pub safety: SafetyVerdict,
    pub stats: GenerationStats,
}

fn valid_gender(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 5 && b[0] == b'f' && b[2] == b' ' && b[3] == b'm' && matches!(b[1], b'0' | b'1') && matches!(b[4], b'0' | b'1')
}

impl ChatModel {
    pub fn load(opts: &ServeOptions) -> Result<Self, ServeError> {
        let ckpt = load_checkpoint(&opts.checkpoint, None)?;
        let store = opts.features.as_ref().map(FeatureStore::open).transpose()?;
        let blocklist = match &opts.blocklist {
            Some(p) => Blocklist::load(p)?,
            None => Blocklist::builtin(),
        };
        let classifier = match &opts.classifier {
            Some(p) => Some(
                OffensiveClassifier::from_json(&std::fs::read_to_string(p)?)
                    .map_err(|e| ServeError::Config(format!("classifier: {e}")))?,
            ),
            None => None,
        };
        let vocab = ckpt.header.vocab.clone();
        Self::new(ckpt.params, vocab, store, blocklist, classifier, opts.beam.clone(), opts.defaults.clone())
    }

    pub fn new(
        params: ModelParams<f32>,
        vocab: Vocab,
        store: Option<FeatureStore>,
        blocklist: Blocklist,
        classifier: Option<OffensiveClassifier>,
        beam: BeamConfig,
        defaults: Defaults,
    ) -> Result<Self, ServeError> {
        beam.validate()?;
        if beam.max_length > params.config.max_positions {
            return Err(ServeError::Config(format!(
                "max_length {} exceeds the model's {} positions",
                beam.max_length, params.config.max_positions
            )));
        }
        let model = Self {
            params,
            vocab,
            store,
            blocklist,
            classifier,
            lexicon: GenderLexicon::builtin(),
            registry: StyleRegistry::builtin(),
            beam,
            defaults,
        };
        model.check_conditioning(&Conditioning {
            style: model.defaults.style.clone(),
            gender: model.defaults.gender.clone(),
        })?;
        Ok(model)
    }

    /// Image ids in feature-file order.
    pub fn image_ids(&self) -> &[String] {
        self.store.as_ref().map_or(&[], |s| s.ids())
    }

    pub fn load_image(&self, image_id: &str) -> Result<Arc<ImageFeatures>, ServeError> {
        match &self.store {
            Some(store) if store.contains(image_id) => Ok(Arc::new(store.load(image_id)?)),
            _ => Err(ServeError::ImageNotFound(image_id.to_string())),
        }
    }

    /// Styles must be registered or a bucket string; gender strings look
    /// like `f0 m1`.
    pub fn check_conditioning(&self, c: &Conditioning) -> Result<(), ServeError> {
        if let Some(style) = &c.style {
            let bucket_string = matches!(style.as_str(), "positive/neutral" | "negative");
            if !bucket_string && self.registry.bucket(style).is_none() {
                return Err(ServeError::InvalidConditioning(format!("unknown style `{style}`")));
            }
        }
        if let Some(g) = &c.gender {
            if !valid_gender(g) {
                return Err(ServeError::InvalidConditioning(format!(
                    "gender control `{g}` must look like `f0 m1`"
                )));
            }
        }
        Ok(())
    }

    /// Resolved conditioning for a session.
    pub fn settings(&self, session: &Session) -> ControlSettings {
        let style = session.conditioning.style.clone().or_else(|| {
            (session.image_id.is_some() || self.defaults.style_without_image)
                .then(|| self.defaults.style.clone())
                .flatten()
        });
        ControlSettings {
            style,
            gender: session.conditioning.gender.clone().or_else(|| self.defaults.gender.clone()),
            include_knowledge: false,
        }
    }

    /// The session history as an encoder example.
    pub fn example(&self, session: &Session) -> Example {
        let ep = Episode {
            dataset_role: if session.image_id.is_some() {
                DatasetRole::ImageChat
            } else {
                DatasetRole::Bst
            },
            context_turns: session.history.iter().map(|t| t.text.clone()).collect(),
            persona_lines: Vec::new(),
            knowledge: None,
            image_ref: session.image_id.clone(),
            style: None,
            partner_style: None,
            label: String::new(),
        };
        let image = session.image.clone().filter(|_| self.params.config.fusion != crate::model::Fusion::None);
        Example::from_episode(&ep, &self.vocab, &self.settings(session)).with_image(image)
    }

    /// Generates the next model turn for `session` without modifying it.
    pub fn respond(&self, session: &Session) -> Result<Reply, ServeError> {
        let start = Instant::now();
        let example = self.example(session);
        let out = generate(&self.params, &example, &self.beam)?;
        let context_ids = example.input[example.input.len().saturating_sub(self.params.config.max_positions)..].to_vec();
        let text = self.vocab.decode(out.best.content());
        let safety = assess(&text, &self.blocklist, self.classifier.as_ref(), &self.lexicon);
        Ok(Reply {
            safety,
            stats: GenerationStats {
                token_ids: out.best.content().to_vec(),
                context_ids,
                beam_scores: out.ranked.iter().map(|h| h.score).collect(),
                finished: out.best.finished,
                fallback_steps: out.fallback_steps,
                elapsed_ms: start.elapsed().as_millis() as u64,
            },
            text,
        })
    }

    /// Appends the human turn (if any) and the generated reply. On error
    /// the session is left unchanged.
    pub fn advance(&self, session: &mut Session, message: Option<&str>) -> Result<Reply, ServeError> {
        let mut next = session.clone();
        if let Some(m) = message {
            if m.trim().is_empty() {
                return Err(ServeError::EmptyMessage);
            }
            next.push(Speaker::Human, m);
        }
        let reply = self.respond(&next)?;
        next.push(Speaker::Model, &reply.text);
        *session = next;
        Ok(reply)
    }
}
