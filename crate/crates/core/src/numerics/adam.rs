use serde::{Deserialize, Serialize};

use super::{dim_err, NumericsError, Real, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp from 0 to `lr` over this many steps.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect at (1-based) `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam with bias correction and linear warmup. Moments are kept per
/// parameter, in the parameter order first seen by [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        Some((self.m.get(index)?, self.v.get(index)?))
    }

    /// Applies one update. `grads[i]` is `None` for parameters that got no
    /// gradient this step; their moments still decay. Returns the learning
    /// rate used.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<&[T]>],
        names: &[String],
    ) -> Result<f64> {
        if params.len() != grads.len() || params.len() != names.len() {
            return Err(dim_err(
                "adam",
                format!("{} params, {} grads, {} names", params.len(), grads.len(), names.len()),
            ));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(dim_err("adam", format!("gradient size for `{name}`")));
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(NumericsError::NonFiniteGradient {
                        param: name.clone(),
                    });
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let cfg = &self.config;
        let lr = cfg.lr_at(self.step);
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (ob1, ob2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(cfg.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match grads[i] {
                Some(g) => {
                    let data = p.data_mut();
                    for j in 0..data.len() {
                        m[j] = b1 * m[j] + ob1 * g[j];
                        v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                        let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                        data[j] -= step_size * m[j] / denom;
                    }
                }
                None => {
                    m.iter_mut().for_each(|x| *x = b1 * *x);
                    v.iter_mut().for_each(|x| *x = b2 * *x);
                }
            }
        }
        Ok(lr)
    }
}
