use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::imagefeat::FeatureKind;

/// How image features reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Text only; features are ignored.
    None,
    /// Text is encoded alone, projected image rows are appended to the
    /// encoder output.
    Late,
    /// Projected image rows are prepended to the text embeddings and both
    /// are self-attended jointly in the encoder.
    Early,
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Fusion::None),
            "late" => Ok(Fusion::Late),
            "early" => Ok(Fusion::Early),
            other => Err(format!("unknown fusion `{other}`")),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::None => "none",
            Fusion::Late => "late",
            Fusion::Early => "early",
        })
    }
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub fusion: Fusion,
    pub feature_kind: FeatureKind,
    pub dropout: f64,
    /// Learned position table for image rows (early fusion).
    #[serde(default = "default_true")]
    pub image_positions: bool,
    /// Late fusion appends one mean-pooled row instead of every row.
    #[serde(default)]
    pub late_pooled: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// 2 encoder layers, 24 decoder layers, 2560-d, 32 heads.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 24,
            d_model: 2560,
            n_heads: 32,
            d_ffn: 10240,
            vocab_size,
            max_positions: 128,
            fusion: Fusion::Early,
            feature_kind: FeatureKind::Region,
            dropout: 0.1,
            image_positions: true,
            late_pooled: false,
            ln_eps: 1e-5,
        }
    }

    /// The CPU-sized preset: 2 encoder layers, 4 decoder layers, 128-d,
    /// 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_enc_layers: 2,
            n_dec_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            vocab_size,
            max_positions: 256,
            fusion: Fusion::Early,
            feature_kind: FeatureKind::Region,
            dropout: 0.0,
            image_positions: true,
            late_pooled: false,
            ln_eps: 1e-5,
        }
    }

    pub fn with_fusion(mut self, fusion: Fusion, kind: FeatureKind) -> Self {
        self.fusion = fusion;
        self.feature_kind = kind;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ffn == 0 {
            return fail("layer counts and d_ffn must be positive".into());
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return fail("vocab_size and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Image rows the decoder sees per example.
    pub fn memory_image_rows(&self) -> usize {
        match self.fusion {
            Fusion::None => 0,
            Fusion::Late if self.late_pooled => 1,
            _ => self.feature_kind.rows(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        let r = ModelConfig::reference(8008);
        assert_eq!((r.n_enc_layers, r.n_dec_layers, r.d_model, r.n_heads), (2, 24, 2560, 32));
        r.validate().unwrap();
        let d = ModelConfig::desk(400);
        assert_eq!((d.n_enc_layers, d.n_dec_layers, d.d_model, d.n_heads), (2, 4, 128, 4));
        d.validate().unwrap();
    }

    #[test]
    fn heads_must_divide() {
        let mut c = ModelConfig::desk(300);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }
}
