use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::layers::{Forward, ImageEncoder, Mlp, Mode, SignalEncoder};
use super::params::ParamStore;
use super::BatchInput;
use crate::autograd::{NodeId, Tensor};
use crate::error::Result;

/// Baseline without disentanglement: signal and image features of every
/// stage are concatenated, averaged over stages and classified.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub signal_encoder: SignalEncoder,
    pub image_encoder: ImageEncoder,
    pub classifier: Mlp,
}

impl BaseModel {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let signal_encoder = SignalEncoder::new(&mut store, "signal_encoder", &config, &mut rng);
        let image_encoder = ImageEncoder::new(&mut store, "image_encoder", &config, &mut rng);
        let classifier = Mlp::new(
            &mut store,
            "classifier",
            2 * config.feature_dim,
            config.head_hidden,
            config.num_classes,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            signal_encoder,
            image_encoder,
            classifier,
        })
    }

    /// Records the forward pass and returns the class-probability node.
    pub fn forward_graph(&self, f: &mut Forward, batch: &BatchInput) -> Result<NodeId> {
        let stages = batch.stages();
        let mut terms = Vec::with_capacity(stages);
        for t in 0..stages {
            let w = f.graph.input(batch.windows[t].clone());
            let img = f.graph.input(batch.images[t].clone());
            let a = self.signal_encoder.forward(f, w)?;
            let u = self.image_encoder.forward(f, img)?;
            terms.push(f.graph.concat(&[a, u])?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = f.graph.add(acc, t)?;
        }
        let mean = f.graph.scale(acc, 1.0 / stages as f64);
        let logits = self.classifier.forward(f, mean)?;
        Ok(f.graph.softmax(logits))
    }

    pub fn predict(&self, batch: &BatchInput) -> Result<Tensor> {
        let mut f = Forward::new(&self.store, Mode::Eval);
        let p = self.forward_graph(&mut f, batch)?;
        Ok(f.graph.value(p).clone())
    }
}
