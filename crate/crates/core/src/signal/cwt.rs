use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::TimeFrequencyImage;
use crate::error::{Error, Result};

/// Complex Morlet scalogram settings. Scales are in samples; the wavelet at
/// scale `a` has its spectral peak at `center_frequency · fs / a` Hz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwtConfig {
    pub num_scales: usize,
    pub min_scale: f64,
    /// Largest scale; `None` means a quarter of the window length.
    pub max_scale: Option<f64>,
    pub center_frequency: f64,
}

impl Default for CwtConfig {
    fn default() -> Self {
        Self {
            num_scales: 64,
            min_scale: 2.0,
            max_scale: None,
            center_frequency: 1.0,
        }
    }
}

/// Precomputed filter bank for windows of one length.
pub struct CwtPlan {
    window_len: usize,
    n_fft: usize,
    scales: Vec<f64>,
    center_frequency: f64,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl CwtPlan {
    pub fn new(window_len: usize, cfg: &CwtConfig) -> Result<Self> {
        if window_len < 8 {
            return Err(Error::InvalidArgument(format!("CWT window of {window_len} samples, need >= 8")));
        }
        let max_scale = cfg.max_scale.unwrap_or(window_len as f64 / 4.0);
        if cfg.num_scales == 0 || !(cfg.min_scale > 0.0 && max_scale >= cfg.min_scale) {
            return Err(Error::Config(format!(
                "CWT scales: {} scales over [{}, {}]",
                cfg.num_scales, cfg.min_scale, max_scale
            )));
        }
        if !(cfg.center_frequency > 0.0) {
            return Err(Error::Config("CWT center frequency must be positive".into()));
        }
        let scales: Vec<f64> = if cfg.num_scales == 1 {
            vec![cfg.min_scale]
        } else {
            let ratio = (max_scale / cfg.min_scale).ln() / (cfg.num_scales - 1) as f64;
            (0..cfg.num_scales)
                .map(|i| cfg.min_scale * (ratio * i as f64).exp())
                .collect()
        };
        let n_fft = (2 * window_len).next_power_of_two();
        let omega0 = 2.0 * PI * cfg.center_frequency;
        // Analytic Morlet in the frequency domain, peak gain 2 so that a unit
        // cosine at the matching scale has unit magnitude.
        let filters = scales
            .iter()
            .map(|&a| {
                (0..n_fft)
                    .map(|k| {
                        if k == 0 || k >= n_fft / 2 {
                            return 0.0;
                        }
                        let omega = 2.0 * PI * k as f64 / n_fft as f64;
                        2.0 * (-0.5 * (a * omega - omega0).powi(2)).exp()
                    })
                    .collect()
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            window_len,
            n_fft,
            scales,
            center_frequency: cfg.center_frequency,
            filters,
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Frequency in Hz at which the wavelet of `scale` peaks.
    pub fn scale_frequency(&self, scale: f64, sample_rate: f64) -> f64 {
        self.center_frequency * sample_rate / scale
    }

    /// Raw magnitude scalogram, `num_scales × window_len`, row-major.
    pub fn magnitudes(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.window_len {
            return Err(Error::dims("cwt window", self.window_len, window.len()));
        }
        if let Some(i) = window.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("CWT input sample {i}")));
        }
        let mut spectrum: Vec<Complex<f64>> = window
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.n_fft)
            .collect();
        self.fft.process(&mut spectrum);
        let n = self.window_len;
        let mut out = vec![0.0; self.scales.len() * n];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for (row, filter) in out.chunks_mut(n).zip(&self.filters) {
            for ((b, s), f) in buf.iter_mut().zip(&spectrum).zip(filter) {
                *b = s * f;
            }
            self.ifft.process(&mut buf);
            for (o, b) in row.iter_mut().zip(&buf) {
                *o = b.norm() / self.n_fft as f64;
            }
        }
        Ok(out)
    }

    /// Scalogram resampled to `resolution × resolution` and min-max
    /// normalized to `[-1, 1]`. A constant window maps to the all `-1` image.
    pub fn image(&self, window: &[f64], sample_rate: f64, resolution: usize) -> Result<TimeFrequencyImage> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("image resolution must be positive".into()));
        }
        let mags = self.magnitudes(window)?;
        let rows = self.scales.len();
        let cols = self.window_len;
        let row_map = resample_weights(rows, resolution);
        let col_map = resample_weights(cols, resolution);

        let mut narrowed = vec![0.0; rows * resolution];
        for r in 0..rows {
            let src = &mags[r * cols..(r + 1) * cols];
            for (j, weights) in col_map.iter().enumerate() {
                narrowed[r * resolution + j] = weights.iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        let mut pixels = vec![0.0; resolution * resolution];
        for (i, weights) in row_map.iter().enumerate() {
            for j in 0..resolution {
                pixels[i * resolution + j] = weights.iter().map(|&(r, w)| w * narrowed[r * resolution + j]).sum();
            }
        }

        let first = window[0];
        let constant = window.iter().all(|&v| v == first);
        let (lo, hi) = pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if constant || !(hi > lo) {
            pixels.iter_mut().for_each(|p| *p = -1.0);
        } else {
            let span = hi - lo;
            pixels.iter_mut().for_each(|p| *p = (2.0 * (*p - lo) / span - 1.0).clamp(-1.0, 1.0));
        }

        let times: Vec<f64> = (0..cols).map(|i| i as f64 / sample_rate).collect();
        let resample = |values: &[f64], map: &[Vec<(usize, f64)>]| -> Vec<f64> {
            map.iter().map(|w| w.iter().map(|&(i, k)| k * values[i]).sum()).collect()
        };
        Ok(TimeFrequencyImage {
            resolution,
            pixels,
            scale_axis: resample(&self.scales, &row_map),
            time_axis: resample(&times, &col_map),
        })
    }
}

/// Computes a time-frequency image with the default wavelet settings.
pub fn cwt_image(window: &[f64], sample_rate: f64, resolution: usize) -> Result<TimeFrequencyImage> {
    CwtPlan::new(window.len(), &CwtConfig::default())?.image(window, sample_rate, resolution)
}

/// Per-output-sample interpolation weights: box averaging when shrinking,
/// linear interpolation (end points aligned) when growing.
fn resample_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    if dst <= src {
        let step = src as f64 / dst as f64;
        (0..dst)
            .map(|j| {
                let start = j as f64 * step;
                let end = start + step;
                let mut weights = Vec::new();
                let mut i = start.floor() as usize;
                while (i as f64) < end && i < src {
                    let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        weights.push((i, overlap / step));
                    }
                    i += 1;
                }
                weights
            })
            .collect()
    } else {
        (0..dst)
            .map(|j| {
                if src == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = j as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let i = (pos.floor() as usize).min(src - 2);
                let frac = pos - i as f64;
                vec![(i, 1.0 - frac), (i + 1, frac)]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolution_is_224() {
        let w: Vec<f64> = (0..400).map(|i| (i as f64 * 0.4).sin()).collect();
        let img = cwt_image(&w, 12_000.0, 224).unwrap();
        assert_eq!(img.pixels.len(), 224 * 224);
        assert_eq!(img.scale_axis.len(), 224);
        assert_eq!(img.time_axis.len(), 224);
        assert!(img.pixels.iter().all(|p| p.is_finite() && (-1.0..=1.0).contains(p)));
    }

    #[test]
    fn zero_window_is_uniform_floor() {
        let img = cwt_image(&[0.0; 64], 1000.0, 32).unwrap();
        assert!(img.pixels.iter().all(|&p| p == -1.0));
        let img = cwt_image(&[3.5; 64], 1000.0, 32).unwrap();
        assert!(img.pixels.iter().all(|&p| p == -1.0));
    }

    #[test]
    fn sinusoid_peaks_at_matching_scale() {
        let plan = CwtPlan::new(512, &CwtConfig::default()).unwrap();
        let fs = 1000.0;
        // Pick a grid scale and drive the wavelet exactly at its centre frequency.
        for &idx in &[10usize, 25, 40] {
            let scale = plan.scales()[idx];
            let f0 = plan.scale_frequency(scale, fs);
            let w: Vec<f64> = (0..512).map(|i| (2.0 * PI * f0 * i as f64 / fs).sin()).collect();
            let img = plan.image(&w, fs, 64).unwrap();
            let energy: Vec<f64> = (0..64).map(|r| img.row(r).iter().sum()).collect();
            let argmax = energy
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            let expected = plan
                .scales()
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    let fa = (plan.scale_frequency(*a.1, fs) - f0).abs();
                    let fb = (plan.scale_frequency(*b.1, fs) - f0).abs();
                    fa.total_cmp(&fb)
                })
                .unwrap()
                .0;
            assert_eq!(argmax, expected);
            assert!((img.scale_axis[argmax] - scale).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_cosine_has_unit_magnitude_at_its_scale() {
        let plan = CwtPlan::new(512, &CwtConfig::default()).unwrap();
        let scale = plan.scales()[20];
        let f0 = plan.scale_frequency(scale, 1.0);
        let w: Vec<f64> = (0..512).map(|i| (2.0 * PI * f0 * i as f64).cos()).collect();
        let mags = plan.magnitudes(&w).unwrap();
        let centre = mags[20 * 512 + 256];
        assert!((centre - 1.0).abs() < 0.02, "{centre}");
    }

    #[test]
    fn amplitude_scaling_leaves_image_unchanged() {
        let w: Vec<f64> = (0..400).map(|i| (i as f64 * 0.9).sin() * (-(i as f64) / 150.0).exp()).collect();
        let scaled: Vec<f64> = w.iter().map(|v| 37.5 * v).collect();
        let a = cwt_image(&w, 12_000.0, 48).unwrap();
        let b = cwt_image(&scaled, 12_000.0, 48).unwrap();
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_short_or_non_finite_windows() {
        assert!(cwt_image(&[1.0; 7], 100.0, 8).is_err());
        let mut w = vec![0.0; 16];
        w[3] = f64::INFINITY;
        assert!(matches!(cwt_image(&w, 100.0, 8), Err(Error::NonFinite(_))));
    }

    #[test]
    fn resample_weights_sum_to_one() {
        for (src, dst) in [(400, 32), (64, 224), (64, 64), (5, 3), (1, 4)] {
            for w in resample_weights(src, dst) {
                let total: f64 = w.iter().map(|p| p.1).sum();
                assert!((total - 1.0).abs() < 1e-12, "{src}->{dst}");
            }
        }
    }
}
