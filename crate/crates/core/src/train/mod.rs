//! Optimization of the joint objective: batching, Adam, running batch-norm
//! statistics, history logging and checkpointing.

mod adam;
mod checkpoint;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointInfo, CHECKPOINT_FORMAT_VERSION};

use crate::autograd::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{apply_bn_updates, BatchInput, BnUpdate, Forward, LatentNoise, Mode, Network, RolloutNodes};
use crate::objectives::{kl_node, mmd_node, nll_node, recon_node, total_loss, KernelSpec, LossBreakdown, LossWeights};
use crate::seed::{mix, SeedPlan};
use crate::signal::PreparedSequence;

/// Which loss terms take part in optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermMask {
    pub elbo: bool,
    pub mmd: bool,
    pub dis: bool,
    pub cls: bool,
}

impl Default for TermMask {
    fn default() -> Self {
        Self {
            elbo: true,
            mmd: true,
            dis: true,
            cls: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per step, split evenly between source and target.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub kernel: KernelSpec,
    pub terms: TermMask,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub max_steps: Option<u64>,
    /// Linear ramp of the KL weight from 1/n to 1 over the first n steps;
    /// 0 keeps it at 1 throughout.
    pub kl_warmup_steps: u64,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Only `"cpu"` is available.
    pub device: String,
    pub strict_deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            kernel: KernelSpec::default(),
            terms: TermMask::default(),
            grad_clip: Some(5.0),
            max_steps: None,
            kl_warmup_steps: 0,
            checkpoint_every: 0,
            seed: 0,
            device: "cpu".into(),
            strict_deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad(format!("batch_size {} must be even and at least 2", self.batch_size));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("learning_rate > 0 and betas in [0, 1) required".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if self.device != "cpu" {
            return bad(format!("device {:?} unavailable; only \"cpu\" is supported", self.device));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.batch_size / 2
    }

    /// KL weight at `step`.
    pub fn kl_scale(&self, step: u64) -> f64 {
        if self.kl_warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.kl_warmup_steps as f64).min(1.0)
        }
    }
}

/// One line of the step history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clamped: usize,
    pub kl_scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// One line of the epoch summary log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub mean_total: f64,
    pub mean_cls: f64,
    pub mean_elbo: f64,
    pub mean_mmd: f64,
    pub mean_dis: f64,
    /// Accuracy (%) on the held-out source set, when one was supplied.
    pub source_val_accuracy: Option<f64>,
    pub wall_clock_s: f64,
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";

/// Network, optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    pub opt: Adam,
    pub step: u64,
    pub seeds: SeedPlan,
}

/// Gradient per parameter, in parameter-id order.
pub type ParamGrads = Vec<(ParamId, Vec<f64>)>;

struct Losses {
    total: NodeId,
    breakdown: LossBreakdown,
    clamped: usize,
}

fn source_labels(items: &[&PreparedSequence]) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|s| {
            s.label()
                .ok_or_else(|| Error::InvalidArgument(format!("source sequence {} has no label", s.sequence.sample_id)))
        })
        .collect()
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(net.store(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
        let seeds = SeedPlan::new(cfg.seed);
        Ok(Self {
            net,
            cfg,
            opt,
            step: 0,
            seeds,
        })
    }

    fn noise(&self, domain: u64) -> LatentNoise {
        LatentNoise::seeded(mix(self.seeds.noise, &[self.step, domain]))
    }

    fn build_losses(&self, f: &mut Forward, src: &BatchInput, labels: &[usize], tgt: &BatchInput) -> Result<Losses> {
        let terms = self.cfg.terms;
        let w = self.cfg.weights;
        let model = match &self.net {
            Network::Base(m) => {
                let probs = m.forward_graph(f, src)?;
                let (cls, clamped) = nll_node(&mut f.graph, probs, labels)?;
                let cls_v = f.graph.value(cls).item();
                let weights = LossWeights {
                    alpha: 0.0,
                    beta: 0.0,
                    gamma: w.gamma,
                };
                let total = f.graph.weighted_sum(&[(cls, w.gamma)]);
                return Ok(Losses {
                    total,
                    breakdown: total_loss(0.0, 0.0, 0.0, 0.0, cls_v, weights)?,
                    clamped,
                });
            }
            Network::Cdhm(m) => m,
        };
        let mut ns = self.noise(0);
        let mut nt = self.noise(1);
        let rs = model.rollout_graph(f, src, &mut ns, terms.elbo)?;
        let rt = model.rollout_graph(f, tgt, &mut nt, terms.elbo)?;
        let g = &mut f.graph;
        let mut parts: Vec<(NodeId, f64)> = Vec::new();
        let mut clamped = 0;
        let value = |g: &Graph, n: NodeId| g.value(n).item();

        let (mut recon_v, mut kl_v) = (0.0, 0.0);
        if terms.elbo {
            let kl_w = 0.5 * self.cfg.kl_scale(self.step);
            for r in [&rs, &rt] {
                let (rec, kl) = elbo_nodes(g, r)?;
                recon_v += 0.5 * value(g, rec);
                kl_v += kl_w * value(g, kl);
                parts.push((rec, 0.5));
                parts.push((kl, kl_w));
            }
        }
        let last = |r: &RolloutNodes| r.steps.last().expect("at least one stage").s;
        let mmd_v = if terms.mmd {
            let n = mmd_node(g, last(&rs), last(&rt), &self.cfg.kernel)?;
            parts.push((n, w.alpha));
            value(g, n)
        } else {
            0.0
        };
        let dis_v = if terms.dis {
            let (a, ca) = nll_node(g, rs.domain_probs, &vec![0; src.len()])?;
            let (b, cb) = nll_node(g, rt.domain_probs, &vec![1; tgt.len()])?;
            clamped += ca + cb;
            parts.push((a, 0.5 * w.beta));
            parts.push((b, 0.5 * w.beta));
            0.5 * (value(g, a) + value(g, b))
        } else {
            0.0
        };
        let cls_v = if terms.cls {
            let (c, cc) = nll_node(g, rs.class_probs, labels)?;
            clamped += cc;
            parts.push((c, w.gamma));
            value(g, c)
        } else {
            0.0
        };
        if parts.is_empty() {
            return Err(Error::Config("no loss term enabled".into()));
        }
        let effective = LossWeights {
            alpha: if terms.mmd { w.alpha } else { 0.0 },
            beta: if terms.dis { w.beta } else { 0.0 },
            gamma: if terms.cls { w.gamma } else { 0.0 },
        };
        let total = g.weighted_sum(&parts);
        Ok(Losses {
            total,
            breakdown: total_loss(recon_v, kl_v, mmd_v, dis_v, cls_v, effective)?,
            clamped,
        })
    }

    /// Loss breakdown and the gradient of the total with respect to every
    /// parameter that takes part, sorted by parameter id. Running buffers are
    /// not touched.
    pub fn loss_and_gradients(
        &self,
        src: &BatchInput,
        labels: &[usize],
        tgt: &BatchInput,
    ) -> Result<(LossBreakdown, ParamGrads)> {
        let (losses, grads, _) = self.forward_backward(src, labels, tgt)?;
        Ok((losses.breakdown, grads))
    }

    fn forward_backward(&self, src: &BatchInput, labels: &[usize], tgt: &BatchInput) -> Result<(Losses, ParamGrads, Vec<BnUpdate>)> {
        if labels.len() != src.len() {
            return Err(Error::dims("source labels", src.len(), labels.len()));
        }
        let classes = self.net.config().num_classes;
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {classes})")));
        }
        let mut f = Forward::new(self.net.store(), Mode::Train);
        let losses = self.build_losses(&mut f, src, labels, tgt)?;
        if !losses.breakdown.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("non-finite loss {:?}", losses.breakdown),
            });
        }
        let grads = f.graph.backward(losses.total);
        let mut params: Vec<_> = f.graph.param_nodes().collect();
        params.sort();
        let bn = f.take_bn_updates();
        let collected = params
            .into_iter()
            .filter_map(|(p, n)| grads.get(n).map(|g| (p, g.to_vec())))
            .collect();
        Ok((losses, collected, bn))
    }

    /// One optimization step on a source batch (labeled) and a target batch
    /// (unlabeled).
    pub fn train_step(&mut self, src: &BatchInput, labels: &[usize], tgt: &BatchInput, epoch: usize) -> Result<StepRecord> {
        let (losses, grads, bn) = self.forward_backward(src, labels, tgt)?;
        let sq: f64 = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: "non-finite gradient".into(),
            });
        }
        let scale = match self.cfg.grad_clip {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-6),
            _ => 1.0,
        };
        let store = self.net.store_mut();
        for (p, g) in &grads {
            if store.entry(*p).kind.trainable() {
                self.opt.update(store, *p, g, scale);
            }
        }
        apply_bn_updates(store, &bn);
        let record = StepRecord {
            step: self.step,
            epoch,
            loss: losses.breakdown,
            grad_norm,
            clamped: losses.clamped,
            kl_scale: self.cfg.kl_scale(self.step),
            learning_rate: self.cfg.learning_rate,
            batch_size: self.cfg.batch_size,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn steps_per_epoch(&self, n_source: usize, n_target: usize) -> u64 {
        let n = match self.net {
            Network::Base(_) => n_source,
            Network::Cdhm(_) => n_source.max(n_target),
        };
        n.div_ceil(self.cfg.half()) as u64
    }

    /// Trains until `epochs` (or `max_steps`) is reached, continuing from the
    /// current step. Target labels are never read.
    pub fn fit(&mut self, source: &[PreparedSequence], target: &[PreparedSequence], out: Option<&Path>) -> Result<Vec<StepRecord>> {
        self.fit_with_validation(source, target, None, out)
    }

    /// [`Trainer::fit`] that also scores a labeled source validation set
    /// after every epoch.
    pub fn fit_with_validation(
        &mut self,
        source: &[PreparedSequence],
        target: &[PreparedSequence],
        validation: Option<&[PreparedSequence]>,
        out: Option<&Path>,
    ) -> Result<Vec<StepRecord>> {
        if source.is_empty() {
            return Err(Error::Empty("source training set"));
        }
        let needs_target = matches!(self.net, Network::Cdhm(_));
        if needs_target && target.is_empty() {
            return Err(Error::Empty("target training set"));
        }
        let half = self.cfg.half();
        let spe = self.steps_per_epoch(source.len(), target.len());
        let total_steps = (spe * self.cfg.epochs as u64).min(self.cfg.max_steps.unwrap_or(u64::MAX));
        let mut logs = match out {
            Some(dir) => Some(Logs::open(dir, self.step == 0)?),
            None => None,
        };
        let mut history = Vec::new();
        while self.step < total_steps {
            let epoch = (self.step / spe) as usize;
            let started = Instant::now();
            let src_order = self.order(epoch, 0, source.len());
            let tgt_order = self.order(epoch, 1, target.len());
            let mut records = Vec::new();
            while self.step < total_steps && (self.step / spe) as usize == epoch {
                let k = (self.step % spe) as usize;
                let s = pick(&src_order, source, k, half);
                let labels = source_labels(&s)?;
                let sb = BatchInput::new(&s)?;
                let tb = if needs_target { BatchInput::new(&pick(&tgt_order, target, k, half))? } else { sb.clone() };
                let rec = self.train_step(&sb, &labels, &tb, epoch)?;
                if let Some(l) = logs.as_mut() {
                    l.step(&rec)?;
                }
                records.push(rec);
            }
            let mut summary = summarize(epoch, &records, self.step);
            if let Some(val) = validation.filter(|v| !v.is_empty()) {
                summary.source_val_accuracy = Some(evaluate(&self.net, val)?.accuracy);
            }
            summary.wall_clock_s = started.elapsed().as_secs_f64();
            log::info!(
                "epoch {epoch}: total {:.4} cls {:.4} elbo {:.4} mmd {:.4} dis {:.4}",
                summary.mean_total,
                summary.mean_cls,
                summary.mean_elbo,
                summary.mean_mmd,
                summary.mean_dis
            );
            let epoch_done = self.step % spe == 0;
            if let (Some(l), Some(dir)) = (logs.as_mut(), out) {
                l.epoch(&summary)?;
                let every = self.cfg.checkpoint_every;
                if epoch_done && every > 0 && (epoch + 1) % every == 0 {
                    save_checkpoint(&dir.join(format!("checkpoint-epoch{:04}.safetensors", epoch + 1)), self)?;
                }
            }
            history.extend(records);
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join(FINAL_CHECKPOINT), self)?;
        }
        Ok(history)
    }

    /// Indices of the source and target items used by step `step`.
    pub fn batch_indices(&self, step: u64, n_source: usize, n_target: usize) -> (Vec<usize>, Vec<usize>) {
        let spe = self.steps_per_epoch(n_source, n_target).max(1);
        let epoch = (step / spe) as usize;
        let k = (step % spe) as usize;
        let half = self.cfg.half();
        let take = |order: Vec<usize>| -> Vec<usize> {
            if order.is_empty() {
                return order;
            }
            (0..half).map(|j| order[(k * half + j) % order.len()]).collect()
        };
        (take(self.order(epoch, 0, n_source)), take(self.order(epoch, 1, n_target)))
    }

    fn order(&self, epoch: usize, domain: u64, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seeds.shuffle, &[epoch as u64, domain]));
        idx.shuffle(&mut rng);
        idx
    }
}

/// Batch `k` of an epoch: consecutive positions of the shuffled order,
/// wrapping around so every batch is full.
fn pick<'a>(order: &[usize], items: &'a [PreparedSequence], k: usize, half: usize) -> Vec<&'a PreparedSequence> {
    (0..half).map(|j| &items[order[(k * half + j) % order.len()]]).collect()
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";

fn elbo_nodes(g: &mut Graph, r: &RolloutNodes) -> Result<(NodeId, NodeId)> {
    let mut recon = Vec::new();
    let mut kl = Vec::new();
    for st in &r.steps {
        let rec = st.recon.ok_or_else(|| Error::InvalidArgument("rollout without reconstruction".into()))?;
        recon.push((recon_node(g, rec, st.image)?, 1.0));
        let (ps, pr) = (st.prior_s.expect("generative"), st.prior_r.expect("generative"));
        kl.push((kl_node(g, st.post_s, ps)?, 1.0));
        kl.push((kl_node(g, st.post_r, pr)?, 1.0));
    }
    Ok((g.weighted_sum(&recon), g.weighted_sum(&kl)))
}

fn summarize(epoch: usize, records: &[StepRecord], steps: u64) -> EpochRecord {
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    EpochRecord {
        epoch,
        steps,
        mean_total: mean(|r| r.loss.total),
        mean_cls: mean(|r| r.loss.cls),
        mean_elbo: mean(|r| r.loss.elbo()),
        mean_mmd: mean(|r| r.loss.mmd),
        mean_dis: mean(|r| r.loss.dis),
        source_val_accuracy: None,
        wall_clock_s: 0.0,
    }
}

struct Logs {
    history: BufWriter<File>,
    epochs: BufWriter<File>,
    paths: [PathBuf; 2],
}

impl Logs {
    fn open(dir: &Path, fresh: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| -> Result<(BufWriter<File>, PathBuf)> {
            let p = dir.join(name);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Ok((BufWriter::new(f), p))
        };
        let (history, hp) = open(HISTORY_FILE)?;
        let (epochs, ep) = open(EPOCHS_FILE)?;
        Ok(Self {
            history,
            epochs,
            paths: [hp, ep],
        })
    }

    fn step(&mut self, r: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.history, r)?;
        writeln!(self.history).map_err(|e| Error::io(&self.paths[0], e))
    }

    fn epoch(&mut self, r: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.epochs, r)?;
        writeln!(self.epochs).map_err(|e| Error::io(&self.paths[1], e))?;
        self.history.flush().map_err(|e| Error::io(&self.paths[0], e))?;
        self.epochs.flush().map_err(|e| Error::io(&self.paths[1], e))
    }
}
