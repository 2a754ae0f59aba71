use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TextDataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub size: usize,
    pub weight: f64,
}

/// Endless seeded stream of `(dataset index, episode index)` draws: a
/// dataset with probability `weight / Σ weights`, then a uniform episode.
#[derive(Clone, Debug)]
pub struct MultitaskSampler {
    sizes: Vec<usize>,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl MultitaskSampler {
    pub fn new(datasets: &[DatasetSpec], seed: u64) -> Result<Self, TextDataError> {
        if datasets.is_empty() {
            return Err(TextDataError::Sampler("no datasets".into()));
        }
        let mut cumulative = Vec::with_capacity(datasets.len());
        let mut total = 0.0;
        for d in datasets {
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return Err(TextDataError::Sampler(format!(
                    "dataset `{}` has non-positive weight {}",
                    d.name, d.weight
                )));
            }
            if d.size == 0 {
                return Err(TextDataError::Sampler(format!(
                    "dataset `{}` is empty but has weight {}",
                    d.name, d.weight
                )));
            }
            total += d.weight;
            cumulative.push(total);
        }
        cumulative.iter_mut().for_each(|c| *c /= total);
        Ok(Self {
            sizes: datasets.iter().map(|d| d.size).collect(),
            cumulative,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Weights proportional to dataset size.
    pub fn proportional(sizes: &[(String, usize)], seed: u64) -> Result<Self, TextDataError> {
        let specs: Vec<_> = sizes
            .iter()
            .map(|(name, size)| DatasetSpec {
                name: name.clone(),
                size: *size,
                weight: *size as f64,
            })
            .collect();
        Self::new(&specs, seed)
    }
}

impl Iterator for MultitaskSampler {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        let u: f64 = self.rng.gen();
        let ds = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let ep = self.rng.gen_range(0..self.sizes[ds]);
        Some((ds, ep))
    }
}
