//! Desk-scale stand-in for bearing test-rig recordings.
//!
//! A localized bearing defect produces an impact every time a rolling element
//! passes it; each impact rings the structure at a resonance. Class `c` is an
//! impulse train at `impulse_freqs_hz[c]` convolved with an exponentially
//! decaying sinusoid at `carrier_hz`. The machine contributes a shaft-rate
//! sinusoid, a gain, a DC offset and a white noise floor, all of which are
//! what distinguish one domain from another.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Domain, LabeledSignal, RawSignal};
use crate::error::{Error, Result};
use crate::seed::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDomainConfig {
    pub name: String,
    pub domain: Domain,
    pub num_classes: usize,
    pub impulse_freqs_hz: Vec<f64>,
    pub carrier_hz: f64,
    /// Resonance decay constant in 1/s.
    pub decay_per_s: f64,
    pub noise_std: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub shaft_hz: f64,
    pub shaft_amplitude: f64,
    /// Relative standard deviation of the inter-impact interval.
    pub jitter: f64,
    pub sample_rate: f64,
    pub sample_len: usize,
    pub seed: u64,
}

impl Default for SyntheticDomainConfig {
    fn default() -> Self {
        Self {
            name: "A".into(),
            domain: Domain::Source,
            num_classes: 4,
            impulse_freqs_hz: vec![90.0, 140.0, 210.0, 310.0],
            carrier_hz: 2600.0,
            decay_per_s: 500.0,
            noise_std: 0.15,
            amplitude: 1.0,
            offset: 0.0,
            shaft_hz: 29.0,
            shaft_amplitude: 0.1,
            jitter: 0.02,
            sample_rate: 12_000.0,
            sample_len: 1200,
            seed: 0,
        }
    }
}

impl SyntheticDomainConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate / 2.0;
        let bad = |msg: String| Err(Error::Config(format!("synthetic domain {}: {msg}", self.name)));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.impulse_freqs_hz.len() != self.num_classes {
            return bad(format!(
                "{} impulse frequencies for {} classes",
                self.impulse_freqs_hz.len(),
                self.num_classes
            ));
        }
        if !(self.sample_rate > 0.0) || self.sample_len == 0 {
            return bad("sample_rate and sample_len must be positive".into());
        }
        for (what, f) in self
            .impulse_freqs_hz
            .iter()
            .map(|&f| ("impulse frequency", f))
            .chain([("carrier", self.carrier_hz), ("shaft", self.shaft_hz)])
        {
            if !(f > 0.0 && f < nyquist) {
                return bad(format!("{what} {f} Hz outside (0, {nyquist})"));
            }
        }
        if !(self.decay_per_s > 0.0) || self.noise_std < 0.0 || self.jitter < 0.0 || !self.amplitude.is_finite() {
            return bad("decay must be positive; noise and jitter non-negative".into());
        }
        Ok(())
    }

    fn generate(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let fs = self.sample_rate;
        let n = self.sample_len;
        let period = fs / self.impulse_freqs_hz[class];
        // Ring-down is negligible after ~8 time constants.
        let ring = ((8.0 / self.decay_per_s) * fs).ceil() as usize;
        let kernel: Vec<f64> = (0..ring)
            .map(|k| {
                let t = k as f64 / fs;
                (-self.decay_per_s * t).exp() * (2.0 * PI * self.carrier_hz * t).sin()
            })
            .collect();
        let mut x = vec![0.0; n];
        let jitter = Normal::new(0.0, self.jitter.max(f64::MIN_POSITIVE)).expect("valid std");
        // Start before the window so the first visible ring-down is not truncated.
        let mut t = -rng.random_range(0.0..period) - ring as f64;
        while t < n as f64 {
            let strength = rng.random_range(0.8..1.2);
            let start = t.round() as isize;
            for (k, h) in kernel.iter().enumerate() {
                let idx = start + k as isize;
                if idx >= 0 && (idx as usize) < n {
                    x[idx as usize] += strength * h;
                }
            }
            t += period * (1.0 + jitter.sample(rng)).max(0.5);
        }
        let shaft_phase = rng.random_range(0.0..2.0 * PI);
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        for (i, v) in x.iter_mut().enumerate() {
            let shaft = self.shaft_amplitude * (2.0 * PI * self.shaft_hz * i as f64 / fs + shaft_phase).sin();
            let floor = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = self.amplitude * (*v + shaft) + self.offset + floor;
        }
        x
    }
}

/// Generates `n_per_class` labeled signals per class, class-major order.
pub fn synth_dataset(cfg: &SyntheticDomainConfig, n_per_class: usize) -> Result<Vec<LabeledSignal>> {
    cfg.validate()?;
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(cfg.num_classes * n_per_class);
    for class in 0..cfg.num_classes {
        for i in 0..n_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[class as u64, i as u64]));
            let samples = cfg.generate(class, &mut rng);
            out.push(LabeledSignal {
                signal: RawSignal::new(samples, cfg.sample_rate, format!("{}-c{class}-{i:04}", cfg.name))?,
                label: Some(class),
                domain: cfg.domain,
            });
        }
    }
    Ok(out)
}
