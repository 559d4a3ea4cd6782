use serde::{Deserialize, Serialize};

use crate::autograd::ConvGeom;
use crate::error::{Error, Result};

/// One layer of the 1-D signal encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv1dSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dSpec {
    pub fn geom(&self) -> ConvGeom {
        ConvGeom::line(self.kernel, self.stride, self.padding)
    }
}

/// Layer sizes of the networks.
///
/// `image_channels[i]` is the output width of encoder block `i`;
/// `decoder_channels[i]` is the input width of transposed block `i`, the last
/// block producing one channel. Both lists have one entry per stride-2
/// block, so `resolution` must be divisible by `2^len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window_len: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub signal_layers: Vec<Conv1dSpec>,
    pub image_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub posterior_hidden: usize,
    pub head_hidden: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_len: 400,
            resolution: 224,
            num_classes: 4,
            feature_dim: 128,
            signal_layers: vec![
                Conv1dSpec {
                    out_channels: 16,
                    kernel: 8,
                    stride: 2,
                    padding: 3,
                },
                Conv1dSpec {
                    out_channels: 32,
                    kernel: 8,
                    stride: 4,
                    padding: 2,
                },
                Conv1dSpec {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                },
            ],
            image_channels: vec![16, 32, 64, 128, 128],
            decoder_channels: vec![128, 64, 32, 16, 8],
            latent_dim: 128,
            hidden_dim: 256,
            posterior_hidden: 128,
            head_hidden: 128,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Length of the signal encoder's last feature map.
    pub fn signal_out_len(&self) -> Option<usize> {
        self.signal_layers
            .iter()
            .try_fold(self.window_len, |len, l| l.geom().out_size(1, len).map(|(_, w)| w))
    }

    pub fn signal_flat_dim(&self) -> Option<usize> {
        let channels = self.signal_layers.last().map_or(1, |l| l.out_channels);
        self.signal_out_len().map(|len| len * channels)
    }

    /// Side length of the decoder's first feature map.
    pub fn decoder_base(&self) -> usize {
        self.resolution >> self.decoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        for (what, v) in [
            ("window_len", self.window_len),
            ("resolution", self.resolution),
            ("feature_dim", self.feature_dim),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("posterior_hidden", self.posterior_hidden),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return bad(format!("{what} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.image_channels.is_empty() || self.decoder_channels.is_empty() {
            return bad("image and decoder need at least one block".into());
        }
        if self.image_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        for (what, depth) in [("encoder", self.image_channels.len()), ("decoder", self.decoder_channels.len())] {
            let div = 1usize << depth;
            if self.resolution % div != 0 {
                return bad(format!(
                    "resolution {} not divisible by 2^{depth} for {depth} {what} blocks",
                    self.resolution
                ));
            }
        }
        if self.signal_layers.iter().any(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
            return bad("signal layers need positive channels, kernel and stride".into());
        }
        if self.signal_out_len().is_none() {
            return bad(format!("window_len {} too short for the signal encoder", self.window_len));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) || self.leaky_slope < 0.0 {
            return bad("bn_momentum in (0, 1], bn_eps > 0 and leaky_slope ≥ 0 required".into());
        }
        Ok(())
    }
}
