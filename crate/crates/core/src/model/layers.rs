use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{ParamKind, ParamStore};
use crate::autograd::{BatchStats, ConvGeom, Graph, NodeId, ParamId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses batch statistics and records them for the running
    /// averages.
    Train,
    /// Batch-norm uses the running averages.
    Eval,
}

pub(crate) struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// A tape being recorded against a parameter store.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.graph.param(id, self.store.get(id))
    }

    pub(crate) fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds recorded batch statistics into the running buffers, in recording
/// order.
pub(crate) fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.weight(format!("{name}.weight"), vec![fan_out, fan_in], fan_in, rng);
        let b = store.filled(format!("{name}.bias"), fan_out, 0.0, ParamKind::Bias);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.graph.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
    pub transposed: bool,
}

impl Conv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        transposed: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (shape, fan_in) = if transposed {
            (vec![cin, cout, geom.kh, geom.kw], cout * geom.kh * geom.kw)
        } else {
            (vec![cout, cin, geom.kh, geom.kw], cin * geom.kh * geom.kw)
        };
        let w = store.weight(format!("{name}.weight"), shape, fan_in, rng);
        let b = store.filled(format!("{name}.bias"), cout, 0.0, ParamKind::Bias);
        Self { w, b, geom, transposed }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = f.param(self.w);
        let b = f.param(self.b);
        if self.transposed {
            f.graph.conv_transpose2d(x, w, Some(b), self.geom)
        } else {
            f.graph.conv2d(x, w, Some(b), self.geom)
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, channels: usize, cfg: &ModelConfig) -> Self {
        Self {
            gamma: store.filled(format!("{name}.weight"), channels, 1.0, ParamKind::BnScale),
            beta: store.filled(format!("{name}.bias"), channels, 0.0, ParamKind::BnShift),
            running_mean: store.filled(format!("{name}.running_mean"), channels, 0.0, ParamKind::RunningMean),
            running_var: store.filled(format!("{name}.running_var"), channels, 1.0, ParamKind::RunningVar),
            eps: cfg.bn_eps,
            momentum: cfg.bn_momentum,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.graph.batch_norm(x, gamma, beta, None, self.eps)?;
                f.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    stats: stats.expect("training statistics"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = f.store;
                let rm = store.get(self.running_mean).data();
                let rv = store.get(self.running_var).data();
                Ok(f.graph.batch_norm(x, gamma, beta, Some((rm, rv)), self.eps)?.0)
            }
        }
    }
}

/// Node ids of one recurrent update.
#[derive(Clone, Copy, Debug)]
pub struct GruGates {
    pub reset: NodeId,
    pub update: NodeId,
    pub candidate: NodeId,
    pub hidden: NodeId,
}

/// Gated recurrent unit:
/// `R = σ(W_R·[x, h] + b_R)`, `Z = σ(W_Z·[x, h] + b_Z)`,
/// `H̃ = tanh(W_H·[x, R⊙h] + b_H)`, `h' = Z⊙H̃ + (1 − Z)⊙h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub reset: Linear,
    pub update: Linear,
    pub candidate: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub(crate) fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let width = input_dim + hidden_dim;
        Self {
            reset: Linear::new(store, &format!("{name}.reset"), width, hidden_dim, rng),
            update: Linear::new(store, &format!("{name}.update"), width, hidden_dim, rng),
            candidate: Linear::new(store, &format!("{name}.candidate"), width, hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    pub fn step(&self, f: &mut Forward, x: NodeId, h: NodeId) -> Result<GruGates> {
        if f.graph.shape(x).get(1) != Some(&self.input_dim) || f.graph.shape(h).get(1) != Some(&self.hidden_dim) {
            return Err(Error::dims(
                "gru",
                format!("[n, {}] and [n, {}]", self.input_dim, self.hidden_dim),
                format!("{:?} and {:?}", f.graph.shape(x), f.graph.shape(h)),
            ));
        }
        let xh = f.graph.concat(&[x, h])?;
        let r_pre = self.reset.forward(f, xh)?;
        let reset = f.graph.sigmoid(r_pre);
        let z_pre = self.update.forward(f, xh)?;
        let update = f.graph.sigmoid(z_pre);
        let rh = f.graph.mul(reset, h)?;
        let xrh = f.graph.concat(&[x, rh])?;
        let c_pre = self.candidate.forward(f, xrh)?;
        let candidate = f.graph.tanh(c_pre);
        let keep = f.graph.scale(update, -1.0);
        let keep = f.graph.add_scalar(keep, 1.0);
        let new_part = f.graph.mul(update, candidate)?;
        let old_part = f.graph.mul(keep, h)?;
        let hidden = f.graph.add(new_part, old_part)?;
        Ok(GruGates {
            reset,
            update,
            candidate,
            hidden,
        })
    }
}

/// 1-D convolution stack with ReLU, flattened into a linear projection.
#[derive(Clone, Debug)]
pub struct SignalEncoder {
    pub convs: Vec<Conv>,
    pub proj: Linear,
    pub window_len: usize,
}

impl SignalEncoder {
    pub(crate) fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, l) in cfg.signal_layers.iter().enumerate() {
            convs.push(Conv::new(store, &format!("{name}.conv{i}"), cin, l.out_channels, l.geom(), false, rng));
            cin = l.out_channels;
        }
        let flat = cfg.signal_flat_dim().expect("validated config");
        let proj = Linear::new(store, &format!("{name}.proj"), flat, cfg.feature_dim, rng);
        Self {
            convs,
            proj,
            window_len: cfg.window_len,
        }
    }

    /// `x: [n, window_len]` → `[n, feature_dim]`.
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let s = f.graph.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.window_len {
            return Err(Error::dims("signal encoder", format!("[n, {}]", self.window_len), format!("{s:?}")));
        }
        let n = s[0];
        let mut h = f.graph.reshape(x, vec![n, 1, 1, self.window_len])?;
        for c in &self.convs {
            let y = c.forward(f, h)?;
            h = f.graph.relu(y);
        }
        let flat: usize = f.graph.shape(h)[1..].iter().product();
        let h = f.graph.reshape(h, vec![n, flat])?;
        self.proj.forward(f, h)
    }
}

/// Stride-2 convolution blocks with batch-norm and ReLU, global average
/// pooling and a linear projection.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub blocks: Vec<(Conv, BatchNorm)>,
    pub proj: Linear,
    pub resolution: usize,
}

impl ImageEncoder {
    pub(crate) fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let mut blocks = Vec::new();
        for (i, &c) in cfg.image_channels.iter().enumerate() {
            let conv = Conv::new(store, &format!("{name}.block{i}.conv"), cin, c, ConvGeom::square(4, 2, 1), false, rng);
            let bn = BatchNorm::new(store, &format!("{name}.block{i}.bn"), c, cfg);
            blocks.push((conv, bn));
            cin = c;
        }
        let proj = Linear::new(store, &format!("{name}.proj"), cin, cfg.feature_dim, rng);
        Self {
            blocks,
            proj,
            resolution: cfg.resolution,
        }
    }

    /// Convolution blocks only: `[n, 1, R, R]` → `[n, c, R/2^k, R/2^k]`.
    pub fn feature_map(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let s = f.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::dims(
                "image encoder",
                format!("[n, 1, {0}, {0}]", self.resolution),
                format!("{s:?}"),
            ));
        }
        let mut h = x;
        for (conv, bn) in &self.blocks {
            let y = conv.forward(f, h)?;
            let y = bn.forward(f, y)?;
            h = f.graph.relu(y);
        }
        Ok(h)
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let h = self.feature_map(f, x)?;
        let pooled = f.graph.global_avg_pool(h)?;
        self.proj.forward(f, pooled)
    }
}

/// Linear projection to a small feature map followed by stride-2 transposed
/// convolutions; all but the last carry batch-norm and leaky ReLU, the last
/// produces one channel squashed by tanh.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub proj: Linear,
    pub blocks: Vec<(Conv, Option<BatchNorm>)>,
    pub base_channels: usize,
    pub base_size: usize,
    pub slope: f64,
}

impl Decoder {
    pub(crate) fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let base_channels = cfg.decoder_channels[0];
        let base_size = cfg.decoder_base();
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            2 * cfg.latent_dim,
            base_channels * base_size * base_size,
            rng,
        );
        let depth = cfg.decoder_channels.len();
        let mut blocks = Vec::new();
        for i in 0..depth {
            let cin = cfg.decoder_channels[i];
            let last = i + 1 == depth;
            let cout = if last { 1 } else { cfg.decoder_channels[i + 1] };
            let conv = Conv::new(store, &format!("{name}.block{i}.deconv"), cin, cout, ConvGeom::square(4, 2, 1), true, rng);
            let bn = (!last).then(|| BatchNorm::new(store, &format!("{name}.block{i}.bn"), cout, cfg));
            blocks.push((conv, bn));
        }
        Self {
            proj,
            blocks,
            base_channels,
            base_size,
            slope: cfg.leaky_slope,
        }
    }

    /// `z: [n, 2·latent]` → `[n, 1, R, R]` in `[-1, 1]`.
    pub fn forward(&self, f: &mut Forward, z: NodeId) -> Result<NodeId> {
        let n = f.graph.shape(z)[0];
        let h = self.proj.forward(f, z)?;
        let h = f.graph.leaky_relu(h, self.slope);
        let mut h = f.graph.reshape(h, vec![n, self.base_channels, self.base_size, self.base_size])?;
        for (conv, bn) in &self.blocks {
            let y = conv.forward(f, h)?;
            h = match bn {
                Some(bn) => {
                    let y = bn.forward(f, y)?;
                    f.graph.leaky_relu(y, self.slope)
                }
                None => f.graph.tanh(y),
            };
        }
        Ok(h)
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub(crate) fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(f, x)?;
        let h = f.graph.relu(h);
        self.out.forward(f, h)
    }
}
