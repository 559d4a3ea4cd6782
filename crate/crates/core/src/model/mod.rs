//! Networks: encoders, prior and posterior disentanglement units, decoder,
//! classifier and domain discriminator, plus the non-disentangled baseline.

mod base;
mod cdhm;
mod config;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::signal::{PreparedSequence, TimeFrequencyImage};

pub use base::BaseModel;
pub use cdhm::{CdhmModel, RecurrentState, Rollout, RolloutNodes, StepNodes};
pub use config::{Conv1dSpec, ModelConfig};
pub(crate) use layers::{apply_bn_updates, BnUpdate};
pub use layers::{BatchNorm, Conv, Decoder, Forward, GruCell, GruGates, ImageEncoder, Linear, Mlp, Mode, SignalEncoder};
pub use params::{ParamEntry, ParamKind, ParamStore};

/// Diagonal Gaussian given by its mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
    pub sample: Option<Vec<f64>>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        let g = Self {
            mean,
            log_variance,
            sample: None,
        };
        g.check()?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.mean.len() != self.log_variance.len() {
            return Err(Error::dims("GaussianLatent", self.mean.len(), self.log_variance.len()));
        }
        if self.mean.iter().chain(&self.log_variance).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian parameters".into()));
        }
        Ok(())
    }

    /// `mean + exp(0.5·log_variance) ⊙ noise`.
    pub fn reparameterize(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::dims("reparameterize noise", self.dim(), noise.len()));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_variance)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }
}

/// Everything one stage of the rollout produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub prior_s: GaussianLatent,
    pub prior_r: GaussianLatent,
    pub post_s: GaussianLatent,
    pub post_r: GaussianLatent,
    pub recon_image: TimeFrequencyImage,
    pub target_image: TimeFrequencyImage,
}

/// The two latent factors: `S` carries the fault class, `R` the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    S,
    R,
}

/// Source of the standard-normal noise used by the reparameterization.
pub enum LatentNoise {
    /// Zero noise: every sample equals its mean.
    Zero,
    Sampled(ChaCha8Rng),
}

impl LatentNoise {
    pub fn seeded(seed: u64) -> Self {
        LatentNoise::Sampled(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn draw(&mut self, n: usize) -> Vec<f64> {
        match self {
            LatentNoise::Zero => vec![0.0; n],
            LatentNoise::Sampled(rng) => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }
}

/// A batch of sequences laid out per stage: `windows[t]: [n, window_len]`,
/// `images[t]: [n, 1, R, R]`.
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub windows: Vec<Tensor>,
    pub images: Vec<Tensor>,
}

impl BatchInput {
    pub fn new(items: &[&PreparedSequence]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("batch"))?;
        let stages = first.sequence.stages();
        let wl = first.sequence.window_len();
        let res = first.images.first().ok_or(Error::Empty("images"))?.resolution;
        let n = items.len();
        let mut windows = vec![Vec::with_capacity(n * wl); stages];
        let mut images = vec![Vec::with_capacity(n * res * res); stages];
        for item in items {
            if item.sequence.stages() != stages || item.images.len() != stages {
                return Err(Error::dims("batch stages", stages, item.sequence.stages()));
            }
            for t in 0..stages {
                let w = &item.sequence.windows[t];
                let img = &item.images[t];
                if w.len() != wl {
                    return Err(Error::dims("batch window length", wl, w.len()));
                }
                if img.resolution != res || img.pixels.len() != res * res {
                    return Err(Error::dims("batch image resolution", res, img.resolution));
                }
                windows[t].extend_from_slice(w);
                images[t].extend_from_slice(&img.pixels);
            }
        }
        Ok(Self {
            windows: windows
                .into_iter()
                .map(|d| Tensor::new(vec![n, wl], d))
                .collect::<Result<_>>()?,
            images: images
                .into_iter()
                .map(|d| Tensor::new(vec![n, 1, res, res], d))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.windows[0].dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stages(&self) -> usize {
        self.windows.len()
    }
}

/// Either network architecture.
#[derive(Clone, Debug)]
pub enum Network {
    Cdhm(CdhmModel),
    Base(BaseModel),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Cdhm,
    Base,
}

impl Network {
    pub fn new(arch: Architecture, cfg: ModelConfig, init_seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::Cdhm => Network::Cdhm(CdhmModel::new(cfg, init_seed)?),
            Architecture::Base => Network::Base(BaseModel::new(cfg, init_seed)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Network::Cdhm(_) => Architecture::Cdhm,
            Network::Base(_) => Architecture::Base,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::Cdhm(m) => &m.config,
            Network::Base(m) => &m.config,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Network::Cdhm(m) => &m.store,
            Network::Base(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Network::Cdhm(m) => &mut m.store,
            Network::Base(m) => &mut m.store,
        }
    }

    /// Class probabilities `[n, C]` in evaluation mode.
    pub fn predict(&self, batch: &BatchInput) -> Result<Tensor> {
        match self {
            Network::Cdhm(m) => m.predict(batch),
            Network::Base(m) => m.predict(batch),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterize_examples() {
        let g = GaussianLatent::new(vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.reparameterize(&[0.0; 3]).unwrap(), g.mean);
        assert_eq!(g.reparameterize(&[0.0, 1.0, 0.0]).unwrap(), vec![1.0, -1.0, 0.5]);
        assert!(g.reparameterize(&[0.0; 2]).is_err());
    }

    #[test]
    fn reparameterize_moments() {
        let g = GaussianLatent::new(vec![2.0], vec![4f64.ln()]).unwrap();
        let mut noise = LatentNoise::seeded(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| g.reparameterize(&noise.draw(1)).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 0.05);
        assert!((var - 4.0).abs() < 0.15);
    }

    #[test]
    fn gaussian_rejects_mismatch_and_non_finite() {
        assert!(GaussianLatent::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(GaussianLatent::new(vec![f64::NAN], vec![0.0]).is_err());
    }
}
