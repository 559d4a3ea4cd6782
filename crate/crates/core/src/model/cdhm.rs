use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{Decoder, Forward, GruCell, ImageEncoder, Linear, Mlp, Mode, SignalEncoder};
use super::params::ParamStore;
use super::{BatchInput, Factor, GaussianLatent, LatentNoise, StepTrace};
use crate::autograd::{NodeId, Tensor};
use crate::error::{Error, Result};
use crate::signal::{PreparedSequence, TimeFrequencyImage};

/// Prior unit of one factor: recurrent cell plus mean and log-variance heads.
#[derive(Clone, Debug)]
pub struct PriorUnit {
    pub gru: GruCell,
    pub mean: Linear,
    pub log_var: Linear,
}

/// Posterior unit of one factor: feature linear (ReLU) plus heads.
#[derive(Clone, Debug)]
pub struct PosteriorUnit {
    pub feature: Linear,
    pub mean: Linear,
    pub log_var: Linear,
}

impl PriorUnit {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gru: GruCell::new(store, &format!("{name}.gru"), cfg.feature_dim + cfg.latent_dim, cfg.hidden_dim, rng),
            mean: Linear::new(store, &format!("{name}.mean"), cfg.hidden_dim, cfg.latent_dim, rng),
            log_var: Linear::new(store, &format!("{name}.log_var"), cfg.hidden_dim, cfg.latent_dim, rng),
        }
    }

    /// Returns `(mean, log_var, new_hidden)`.
    fn forward(&self, f: &mut Forward, a: NodeId, prev: NodeId, h: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
        let x = f.graph.concat(&[a, prev])?;
        let h = self.gru.step(f, x, h)?.hidden;
        let m = self.mean.forward(f, h)?;
        let lv = self.log_var.forward(f, h)?;
        Ok((m, lv, h))
    }
}

impl PosteriorUnit {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = 2 * cfg.feature_dim + cfg.latent_dim;
        Self {
            feature: Linear::new(store, &format!("{name}.feature"), input, cfg.posterior_hidden, rng),
            mean: Linear::new(store, &format!("{name}.mean"), cfg.posterior_hidden, cfg.latent_dim, rng),
            log_var: Linear::new(store, &format!("{name}.log_var"), cfg.posterior_hidden, cfg.latent_dim, rng),
        }
    }

    fn forward(&self, f: &mut Forward, a: NodeId, u: NodeId, prev: NodeId) -> Result<(NodeId, NodeId)> {
        let x = f.graph.concat(&[a, u, prev])?;
        let h = self.feature.forward(f, x)?;
        let h = f.graph.relu(h);
        Ok((self.mean.forward(f, h)?, self.log_var.forward(f, h)?))
    }
}

/// Recurrent hidden states of the two prior units.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub hidden_s: Vec<f64>,
    pub hidden_r: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            hidden_s: vec![0.0; hidden_dim],
            hidden_r: vec![0.0; hidden_dim],
        }
    }
}

/// Graph nodes of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StepNodes {
    pub signal_feature: NodeId,
    pub image_feature: NodeId,
    pub prior_s: Option<(NodeId, NodeId)>,
    pub prior_r: Option<(NodeId, NodeId)>,
    pub post_s: (NodeId, NodeId),
    pub post_r: (NodeId, NodeId),
    pub s: NodeId,
    pub r: NodeId,
    pub recon: Option<NodeId>,
    pub image: NodeId,
}

#[derive(Clone, Debug)]
pub struct RolloutNodes {
    pub steps: Vec<StepNodes>,
    pub class_probs: NodeId,
    pub domain_probs: NodeId,
}

/// Plain-value result of a single-sequence rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub traces: Vec<StepTrace>,
    pub class_probs: Vec<f64>,
    pub domain_probs: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct CdhmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub signal_encoder: SignalEncoder,
    pub image_encoder: ImageEncoder,
    pub prior_s: PriorUnit,
    pub prior_r: PriorUnit,
    pub post_s: PosteriorUnit,
    pub post_r: PosteriorUnit,
    pub decoder: Decoder,
    pub classifier: Mlp,
    pub discriminator: Mlp,
}

fn row_input(f: &mut Forward, v: &[f64]) -> NodeId {
    f.graph.input(Tensor::new(vec![1, v.len()], v.to_vec()).expect("shape"))
}

fn check_len(ctx: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::dims(ctx, expected, v.len()));
    }
    Ok(())
}

fn index_axis(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64).collect()
}

impl CdhmModel {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let signal_encoder = SignalEncoder::new(&mut store, "signal_encoder", cfg, &mut rng);
        let image_encoder = ImageEncoder::new(&mut store, "image_encoder", cfg, &mut rng);
        let prior_s = PriorUnit::new(&mut store, "prior_s", cfg, &mut rng);
        let prior_r = PriorUnit::new(&mut store, "prior_r", cfg, &mut rng);
        let post_s = PosteriorUnit::new(&mut store, "post_s", cfg, &mut rng);
        let post_r = PosteriorUnit::new(&mut store, "post_r", cfg, &mut rng);
        let decoder = Decoder::new(&mut store, "decoder", cfg, &mut rng);
        let classifier = Mlp::new(&mut store, "classifier", cfg.latent_dim, cfg.head_hidden, cfg.num_classes, &mut rng);
        let discriminator = Mlp::new(&mut store, "discriminator", cfg.latent_dim, cfg.head_hidden, 2, &mut rng);
        Ok(Self {
            config,
            store,
            signal_encoder,
            image_encoder,
            prior_s,
            prior_r,
            post_s,
            post_r,
            decoder,
            classifier,
            discriminator,
        })
    }

    fn prior(&self, factor: Factor) -> &PriorUnit {
        match factor {
            Factor::S => &self.prior_s,
            Factor::R => &self.prior_r,
        }
    }

    fn posterior(&self, factor: Factor) -> &PosteriorUnit {
        match factor {
            Factor::S => &self.post_s,
            Factor::R => &self.post_r,
        }
    }

    pub fn classify_node(&self, f: &mut Forward, s: NodeId) -> Result<NodeId> {
        let logits = self.classifier.forward(f, s)?;
        Ok(f.graph.softmax(logits))
    }

    pub fn discriminate_node(&self, f: &mut Forward, r: NodeId) -> Result<NodeId> {
        let logits = self.discriminator.forward(f, r)?;
        let p = f.graph.sigmoid(logits);
        Ok(f.graph.row_normalize(p))
    }

    /// Records the whole sequence model on `f`. With `generative` false the
    /// prior units and the decoder are skipped.
    pub fn rollout_graph(
        &self,
        f: &mut Forward,
        batch: &BatchInput,
        noise: &mut LatentNoise,
        generative: bool,
    ) -> Result<RolloutNodes> {
        let cfg = &self.config;
        let n = batch.len();
        let zero_latent = f.graph.input(Tensor::zeros(vec![n, cfg.latent_dim]));
        let zero_hidden = f.graph.input(Tensor::zeros(vec![n, cfg.hidden_dim]));
        let (mut prev_s, mut prev_r) = (zero_latent, zero_latent);
        let (mut h_s, mut h_r) = (zero_hidden, zero_hidden);
        let mut steps = Vec::with_capacity(batch.stages());
        for t in 0..batch.stages() {
            let window = f.graph.input(batch.windows[t].clone());
            let image = f.graph.input(batch.images[t].clone());
            let a = self.signal_encoder.forward(f, window)?;
            let u = self.image_encoder.forward(f, image)?;
            let (prior_s, prior_r) = if generative {
                let (m_s, lv_s, hs) = self.prior_s.forward(f, a, prev_s, h_s)?;
                let (m_r, lv_r, hr) = self.prior_r.forward(f, a, prev_r, h_r)?;
                h_s = hs;
                h_r = hr;
                (Some((m_s, lv_s)), Some((m_r, lv_r)))
            } else {
                (None, None)
            };
            let post_s = self.post_s.forward(f, a, u, prev_s)?;
            let post_r = self.post_r.forward(f, a, u, prev_r)?;
            let eps_s = noise.draw(n * cfg.latent_dim);
            let eps_r = noise.draw(n * cfg.latent_dim);
            let s = f.graph.reparameterize(post_s.0, post_s.1, eps_s)?;
            let r = f.graph.reparameterize(post_r.0, post_r.1, eps_r)?;
            let recon = if generative {
                let z = f.graph.concat(&[s, r])?;
                Some(self.decoder.forward(f, z)?)
            } else {
                None
            };
            steps.push(StepNodes {
                signal_feature: a,
                image_feature: u,
                prior_s,
                prior_r,
                post_s,
                post_r,
                s,
                r,
                recon,
                image,
            });
            prev_s = s;
            prev_r = r;
        }
        let class_probs = self.classify_node(f, prev_s)?;
        let domain_probs = self.discriminate_node(f, prev_r)?;
        Ok(RolloutNodes {
            steps,
            class_probs,
            domain_probs,
        })
    }

    /// Class probabilities in evaluation mode from posterior means.
    pub fn predict(&self, batch: &BatchInput) -> Result<Tensor> {
        let mut f = Forward::new(&self.store, Mode::Eval);
        let nodes = self.rollout_graph(&mut f, batch, &mut LatentNoise::Zero, false)?;
        Ok(f.graph.value(nodes.class_probs).clone())
    }

    /// Full evaluation-mode rollout of one sequence.
    pub fn rollout(&self, seq: &PreparedSequence, noise: &mut LatentNoise) -> Result<Rollout> {
        let batch = BatchInput::new(&[seq])?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let nodes = self.rollout_graph(&mut f, &batch, noise, true)?;
        let g = &f.graph;
        let v = |n: NodeId| g.value(n).data().to_vec();
        let latent = |(m, lv): (NodeId, NodeId), sample: Option<NodeId>| GaussianLatent {
            mean: v(m),
            log_variance: v(lv),
            sample: sample.map(v),
        };
        let traces = nodes
            .steps
            .iter()
            .enumerate()
            .map(|(t, st)| {
                let target = seq.images[t].clone();
                StepTrace {
                    t,
                    prior_s: latent(st.prior_s.expect("generative"), None),
                    prior_r: latent(st.prior_r.expect("generative"), None),
                    post_s: latent(st.post_s, Some(st.s)),
                    post_r: latent(st.post_r, Some(st.r)),
                    recon_image: TimeFrequencyImage {
                        resolution: target.resolution,
                        pixels: v(st.recon.expect("generative")),
                        scale_axis: target.scale_axis.clone(),
                        time_axis: target.time_axis.clone(),
                    },
                    target_image: target,
                }
            })
            .collect();
        let d = v(nodes.domain_probs);
        Ok(Rollout {
            traces,
            class_probs: v(nodes.class_probs),
            domain_probs: [d[0], d[1]],
        })
    }

    pub fn encode_signal(&self, window: &[f64]) -> Result<Vec<f64>> {
        check_len("encode_signal window", self.config.window_len, window)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let x = row_input(&mut f, window);
        let y = self.signal_encoder.forward(&mut f, x)?;
        Ok(f.graph.value(y).data().to_vec())
    }

    pub fn encode_image(&self, image: &TimeFrequencyImage) -> Result<Vec<f64>> {
        let res = self.config.resolution;
        if image.resolution != res || image.pixels.len() != res * res {
            return Err(Error::dims("encode_image resolution", res, image.resolution));
        }
        let mut f = Forward::new(&self.store, Mode::Eval);
        let x = f.graph.input(Tensor::new(vec![1, 1, res, res], image.pixels.clone())?);
        let y = self.image_encoder.forward(&mut f, x)?;
        Ok(f.graph.value(y).data().to_vec())
    }

    /// One prior update for `factor`; advances that factor's hidden state.
    pub fn prior_step(&self, factor: Factor, a_feat: &[f64], prev_sample: &[f64], state: &mut RecurrentState) -> Result<GaussianLatent> {
        let cfg = &self.config;
        check_len("prior_step feature", cfg.feature_dim, a_feat)?;
        check_len("prior_step previous sample", cfg.latent_dim, prev_sample)?;
        let hidden = match factor {
            Factor::S => &mut state.hidden_s,
            Factor::R => &mut state.hidden_r,
        };
        check_len("prior_step hidden", cfg.hidden_dim, hidden)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let a = row_input(&mut f, a_feat);
        let p = row_input(&mut f, prev_sample);
        let h = row_input(&mut f, hidden);
        let (m, lv, h) = self.prior(factor).forward(&mut f, a, p, h)?;
        *hidden = f.graph.value(h).data().to_vec();
        GaussianLatent::new(f.graph.value(m).data().to_vec(), f.graph.value(lv).data().to_vec())
    }

    pub fn posterior_step(&self, factor: Factor, a_feat: &[f64], u_feat: &[f64], prev_sample: &[f64]) -> Result<GaussianLatent> {
        let cfg = &self.config;
        check_len("posterior_step signal feature", cfg.feature_dim, a_feat)?;
        check_len("posterior_step image feature", cfg.feature_dim, u_feat)?;
        check_len("posterior_step previous sample", cfg.latent_dim, prev_sample)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let a = row_input(&mut f, a_feat);
        let u = row_input(&mut f, u_feat);
        let p = row_input(&mut f, prev_sample);
        let (m, lv) = self.posterior(factor).forward(&mut f, a, u, p)?;
        GaussianLatent::new(f.graph.value(m).data().to_vec(), f.graph.value(lv).data().to_vec())
    }

    pub fn decode_image(&self, s: &[f64], r: &[f64]) -> Result<TimeFrequencyImage> {
        let cfg = &self.config;
        check_len("decode_image s", cfg.latent_dim, s)?;
        check_len("decode_image r", cfg.latent_dim, r)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let mut z = s.to_vec();
        z.extend_from_slice(r);
        let z = row_input(&mut f, &z);
        let y = self.decoder.forward(&mut f, z)?;
        Ok(TimeFrequencyImage {
            resolution: cfg.resolution,
            pixels: f.graph.value(y).data().to_vec(),
            scale_axis: index_axis(cfg.resolution),
            time_axis: index_axis(cfg.resolution),
        })
    }

    pub fn classify(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_len("classify", self.config.latent_dim, s)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let x = row_input(&mut f, s);
        let p = self.classify_node(&mut f, x)?;
        Ok(f.graph.value(p).data().to_vec())
    }

    pub fn discriminate(&self, r: &[f64]) -> Result<[f64; 2]> {
        check_len("discriminate", self.config.latent_dim, r)?;
        let mut f = Forward::new(&self.store, Mode::Eval);
        let x = row_input(&mut f, r);
        let p = self.discriminate_node(&mut f, x)?;
        let d = f.graph.value(p).data();
        Ok([d[0], d[1]])
    }
}
