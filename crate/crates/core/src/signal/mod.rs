//! Vibration signal ingestion, windowing, time-frequency imaging, noise
//! injection and synthetic two-domain datasets.

mod cwt;
pub mod io;
mod noise;
mod split;
mod synth;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cwt::{cwt_image, CwtConfig, CwtPlan};
pub use noise::add_noise_at_snr;
pub use split::{split_train_test, Labeled};
pub use synth::{synth_dataset, SyntheticDomainConfig};
pub use window::slide_windows;

/// Raw acceleration samples from one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSignal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub source_id: String,
}

impl RawSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64, source_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("signal samples"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("signal sample {i}")));
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::InvalidArgument(format!("sample rate {sample_rate}")));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Class index used by the domain discriminator.
    pub fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// A raw signal with its fault class and domain tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSignal {
    pub signal: RawSignal,
    pub label: Option<usize>,
    pub domain: Domain,
}

/// `T` consecutive equal-length windows cut from one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSequence {
    pub windows: Vec<Vec<f64>>,
    pub label: Option<usize>,
    pub domain: Domain,
    pub sample_id: String,
}

impl WindowSequence {
    pub fn new(
        windows: Vec<Vec<f64>>,
        label: Option<usize>,
        domain: Domain,
        sample_id: impl Into<String>,
    ) -> Result<Self> {
        let len = windows.first().map(Vec::len).ok_or(Error::Empty("window sequence"))?;
        if let Some(w) = windows.iter().find(|w| w.len() != len) {
            return Err(Error::dims("WindowSequence", len, w.len()));
        }
        Ok(Self {
            windows,
            label,
            domain,
            sample_id: sample_id.into(),
        })
    }

    pub fn stages(&self) -> usize {
        self.windows.len()
    }

    pub fn window_len(&self) -> usize {
        self.windows[0].len()
    }

    /// Drops the fault label, as required for target-domain training data.
    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }
}

/// CWT magnitude image normalized to `[-1, 1]`, stored row-major with one
/// row per wavelet scale (smallest scale first) and one column per time
/// offset.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeFrequencyImage {
    pub resolution: usize,
    pub pixels: Vec<f64>,
    pub scale_axis: Vec<f64>,
    pub time_axis: Vec<f64>,
}

impl TimeFrequencyImage {
    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.resolution + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.pixels[row * self.resolution..(row + 1) * self.resolution]
    }
}

/// Windowing and imaging settings shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub window_len: usize,
    pub hop: usize,
    pub stages: usize,
    pub resolution: usize,
    pub cwt: CwtConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_len: 400,
            hop: 200,
            stages: 5,
            resolution: 224,
            cwt: CwtConfig::default(),
        }
    }
}

/// A window sequence together with the time-frequency image of every window.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSequence {
    pub sequence: WindowSequence,
    pub images: Vec<TimeFrequencyImage>,
}

impl PreparedSequence {
    pub fn label(&self) -> Option<usize> {
        self.sequence.label
    }

    pub fn unlabeled(mut self) -> Self {
        self.sequence.label = None;
        self
    }
}

impl PipelineConfig {
    /// Windows one labeled signal into exactly `stages` windows.
    pub fn sequence(&self, item: &LabeledSignal) -> Result<WindowSequence> {
        let windows = slide_windows(&item.signal.samples, self.window_len, self.hop)?;
        if windows.len() != self.stages {
            return Err(Error::InvalidArgument(format!(
                "signal {} yields {} windows, expected {} stages",
                item.signal.source_id,
                windows.len(),
                self.stages
            )));
        }
        WindowSequence::new(windows, item.label, item.domain, item.signal.source_id.clone())
    }

    /// Windows and images every signal. Output order equals input order.
    pub fn prepare(&self, items: &[LabeledSignal]) -> Result<Vec<PreparedSequence>> {
        let plan = CwtPlan::new(self.window_len, &self.cwt)?;
        items
            .iter()
            .map(|item| {
                let sequence = self.sequence(item)?;
                let images = sequence
                    .windows
                    .iter()
                    .map(|w| plan.image(w, item.signal.sample_rate, self.resolution))
                    .collect::<Result<Vec<_>>>()?;
                Ok(PreparedSequence { sequence, images })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_signal_rejects_empty_and_non_finite() {
        assert!(RawSignal::new(vec![], 1.0, "a").is_err());
        assert!(RawSignal::new(vec![1.0, f64::NAN], 1.0, "a").is_err());
        assert!(RawSignal::new(vec![1.0], 0.0, "a").is_err());
        assert!(RawSignal::new(vec![1.0], 10.0, "a").is_ok());
    }

    #[test]
    fn default_pipeline_gives_five_stages_from_1200_samples() {
        let cfg = PipelineConfig {
            resolution: 16,
            ..PipelineConfig::default()
        };
        let samples: Vec<f64> = (0..1200).map(|i| (i as f64 * 0.3).sin()).collect();
        let item = LabeledSignal {
            signal: RawSignal::new(samples, 12_000.0, "s0").unwrap(),
            label: Some(1),
            domain: Domain::Source,
        };
        let prepared = cfg.prepare(std::slice::from_ref(&item)).unwrap();
        assert_eq!(prepared[0].sequence.stages(), 5);
        assert_eq!(prepared[0].images.len(), 5);
        assert_eq!(prepared[0].images[0].pixels.len(), 16 * 16);
        assert_eq!(prepared[0].label(), Some(1));
        assert_eq!(prepared[0].clone().unlabeled().label(), None);
    }

    #[test]
    fn wrong_stage_count_is_rejected() {
        let cfg = PipelineConfig::default();
        let item = LabeledSignal {
            signal: RawSignal::new(vec![0.5; 1000], 12_000.0, "short").unwrap(),
            label: None,
            domain: Domain::Target,
        };
        assert!(cfg.sequence(&item).is_err());
    }
}
