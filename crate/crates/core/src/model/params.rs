use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Fusion, ModelConfig, ModelError};
use crate::imagefeat::{FeatureKind, FEATURE_DIM};
use crate::numerics::{Real, Tensor};

/// Index of a tensor in [`ModelParams`].
pub type ParamId = usize;

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Attn {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross_attn: Attn,
    pub ln3: Norm,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub(crate) struct ImageParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: Option<ParamId>,
}

/// Where each named tensor lives.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    pub image: Option<ImageParams>,
    pub enc: Vec<EncLayer>,
    pub enc_ln: Norm,
    pub dec: Vec<DecLayer>,
    pub dec_ln: Norm,
}

#[derive(Clone, Copy)]
enum Init {
    Normalish,
    Ones,
    Zeros,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            g: self.add(format!("{prefix}.g"), vec![d], Init::Ones),
            b: self.add(format!("{prefix}.b"), vec![d], Init::Zeros),
        }
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> (ParamId, ParamId) {
        (
            self.add(format!("{prefix}.w"), vec![din, dout], Init::Normalish),
            self.add(format!("{prefix}.b"), vec![dout], Init::Zeros),
        )
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        let (q_w, q_b) = self.linear(&format!("{prefix}.q"), d, d);
        let (k_w, k_b) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_w, v_b) = self.linear(&format!("{prefix}.v"), d, d);
        let (o_w, o_b) = self.linear(&format!("{prefix}.o"), d, d);
        Attn {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Ffn {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, f);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), f, d);
        Ffn { w1, b1, w2, b2 }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.d_model;
    let mut b = Builder { specs: Vec::new() };
    let tok_emb = b.add("tok_emb".into(), vec![cfg.vocab_size, d], Init::Normalish);
    let pos_emb = b.add("pos_emb".into(), vec![cfg.max_positions, d], Init::Normalish);
    let seg_emb = b.add("seg_emb".into(), vec![2, d], Init::Normalish);
    let image = (cfg.fusion != Fusion::None).then(|| {
        let (proj_w, proj_b) = b.linear("img_proj", FEATURE_DIM, d);
        let pos = (cfg.fusion == Fusion::Early && cfg.image_positions).then(|| {
            b.add(
                "img_pos_emb".into(),
                vec![FeatureKind::Region.rows(), d],
                Init::Normalish,
            )
        });
        ImageParams { proj_w, proj_b, pos }
    });
    let enc = (0..cfg.n_enc_layers)
        .map(|i| EncLayer {
            ln1: b.norm(&format!("enc.{i}.ln1"), d),
            attn: b.attn(&format!("enc.{i}.attn"), d),
            ln2: b.norm(&format!("enc.{i}.ln2"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), d, cfg.d_ffn),
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let dec = (0..cfg.n_dec_layers)
        .map(|i| DecLayer {
            ln1: b.norm(&format!("dec.{i}.ln1"), d),
            self_attn: b.attn(&format!("dec.{i}.self"), d),
            ln2: b.norm(&format!("dec.{i}.ln2"), d),
            cross_attn: b.attn(&format!("dec.{i}.cross"), d),
            ln3: b.norm(&format!("dec.{i}.ln3"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), d, cfg.d_ffn),
        })
        .collect();
    let dec_ln = b.norm("dec.ln", d);
    (
        Layout {
            tok_emb,
            pos_emb,
            seg_emb,
            image,
            enc,
            enc_ln,
            dec,
            dec_ln,
        },
        b.specs,
    )
}

/// Every learnable tensor of the network, in a fixed order. The output
/// projection is tied to `tok_emb`.
#[derive(Clone, Debug)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    pub(crate) layout: Layout,
}

/// Names and shapes implied by a config, in parameter order.
pub fn param_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    build_layout(cfg)
        .1
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect()
}

const INIT_STD: f64 = 0.02;

impl<T: Real> ModelParams<T> {
    /// Random initialization: weights uniform with standard deviation 0.02,
    /// norm gains one, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = INIT_STD * 3f64.sqrt();
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape, init) in specs {
            let t = match init {
                Init::Normalish => Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound))),
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::Zeros => Tensor::zeros(&shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    /// Assembles params from named tensors, checking every shape against
    /// the config.
    pub fn from_tensors(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(config);
        if specs.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "config implies {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((sname, sshape, _), (name, t)) in specs.into_iter().zip(named) {
            if sname != name || sshape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected `{sname}` {sshape:?}, found `{name}` {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::Checkpoint(format!("non-finite values in `{name}`")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Ids of the image projection (trainable image path).
    pub fn image_projection_ids(&self) -> Option<(ParamId, ParamId)> {
        self.layout.image.as_ref().map(|i| (i.proj_w, i.proj_b))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_is_deterministic() {
        let cfg = ModelConfig::desk(300).with_fusion(Fusion::Early, FeatureKind::Region);
        let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        // tok 300·128, pos 256·128, seg 2·128, img proj 2048·128+128,
        // img pos 100·128, enc 2·(2 norms + attn + ffn) + final norm,
        // dec 4·(3 norms + 2 attn + ffn) + final norm.
        let d = 128;
        let norm = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * 512 + 512 + 512 * d + d;
        let expected = 300 * d + 256 * d + 2 * d + (2048 * d + d) + 100 * d
            + 2 * (2 * norm + attn + ffn)
            + norm
            + 4 * (3 * norm + 2 * attn + ffn)
            + norm;
        assert_eq!(a.num_params(), expected);
        assert_eq!(a.names().len(), param_manifest(&cfg).len());
    }

    #[test]
    fn none_fusion_has_no_image_params() {
        let cfg = ModelConfig::desk(300).with_fusion(Fusion::None, FeatureKind::Global);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert!(p.image_projection_ids().is_none());
        assert!(p.by_name("img_proj.w").is_none());
    }

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::desk(300);
        let a = ModelParams::<f32>::init(&cfg, 5).unwrap();
        let b = ModelParams::<f32>::init(&cfg, 5).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
    }
}
