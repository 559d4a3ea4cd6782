use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::plot::{confusion_svg, line_chart_svg, loss_curve_svg, Series};
use super::report::{confusion_csv, snr_csv, spearman, write_json};
use super::{evaluate, ConfusionMatrix};
use crate::error::{Error, Result};
use crate::model::{Architecture, Conv1dSpec, ModelConfig, Network};
use crate::objectives::LossWeights;
use crate::seed::{mix, SeedPlan};
use crate::signal::io::load_manifest;
use crate::signal::{
    add_noise_at_snr, split_train_test, synth_dataset, Domain, LabeledSignal, PipelineConfig, PreparedSequence, RawSignal,
    SyntheticDomainConfig,
};
use crate::train::{TermMask, TrainConfig, Trainer};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where the two domains come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic {
        source: SyntheticDomainConfig,
        target: SyntheticDomainConfig,
        per_class: usize,
    },
    Manifest {
        source: PathBuf,
        target: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task_id: Option<String>,
    pub data: DataSpec,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training share of each class.
    pub split_ratio: f64,
    pub split_seed: u64,
    /// One repeat per seed.
    pub seeds: Vec<u64>,
    pub snr_db: Vec<f64>,
    /// Also run the baseline network in SNR sweeps.
    pub snr_compare_base: bool,
    /// Score the held-out source split after every epoch.
    pub source_validation: bool,
    pub reference_accuracy: Option<f64>,
}

fn shifted_target() -> SyntheticDomainConfig {
    SyntheticDomainConfig {
        name: "B".into(),
        domain: Domain::Target,
        carrier_hz: 3800.0,
        amplitude: 2.0,
        offset: 0.5,
        seed: 1,
        ..SyntheticDomainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task_id: None,
            data: DataSpec::Synthetic {
                source: SyntheticDomainConfig::default(),
                target: shifted_target(),
                per_class: 200,
            },
            pipeline: PipelineConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split_ratio: 0.7,
            split_seed: 0,
            seeds: vec![0, 1, 2],
            snr_db: vec![-2.0, 0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            snr_compare_base: false,
            source_validation: false,
            reference_accuracy: None,
        }
    }
}

impl ExperimentConfig {
    /// Reduced widths and resolution for single-core runs of the synthetic
    /// analogs. KL is ramped in over 300 steps; α = 2, γ = 3.
    pub fn desk() -> Self {
        let base = Self::default();
        Self {
            pipeline: PipelineConfig {
                resolution: 32,
                ..base.pipeline
            },
            model: ModelConfig {
                resolution: 32,
                feature_dim: 64,
                signal_layers: vec![
                    Conv1dSpec {
                        out_channels: 8,
                        kernel: 8,
                        stride: 4,
                        padding: 2,
                    },
                    Conv1dSpec {
                        out_channels: 16,
                        kernel: 8,
                        stride: 4,
                        padding: 2,
                    },
                ],
                image_channels: vec![8, 16, 32],
                decoder_channels: vec![32, 16, 8],
                latent_dim: 32,
                hidden_dim: 64,
                posterior_hidden: 64,
                head_hidden: 64,
                ..base.model
            },
            train: TrainConfig {
                epochs: 15,
                learning_rate: 1e-3,
                weights: LossWeights {
                    alpha: 2.0,
                    beta: 0.2,
                    gamma: 3.0,
                },
                kl_warmup_steps: 300,
                ..base.train
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.window_len != self.pipeline.window_len || self.model.resolution != self.pipeline.resolution {
            return Err(Error::Config(format!(
                "model window_len/resolution ({}, {}) differ from pipeline ({}, {})",
                self.model.window_len, self.model.resolution, self.pipeline.window_len, self.pipeline.resolution
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let DataSpec::Synthetic { source, target, .. } = &self.data {
            for d in [source, target] {
                d.validate()?;
                if d.num_classes != self.model.num_classes {
                    return Err(Error::Config(format!(
                        "domain {} has {} classes, model has {}",
                        d.name, d.num_classes, self.model.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn task_id(&self) -> String {
        self.task_id.clone().unwrap_or_else(|| match &self.data {
            DataSpec::Synthetic { source, target, .. } => format!("{}→{}", source.name, target.name),
            DataSpec::Manifest { source, target } => {
                let stem = |p: &Path| p.parent().and_then(|d| d.file_name()).map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                format!("{}→{}", stem(source), stem(target))
            }
        })
    }
}

/// Loss sets of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Classification only, on the baseline network.
    L1,
    /// MMD and classification.
    L2,
    /// ELBO and classification.
    L3,
    /// Every term.
    L,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [AblationVariant::L1, AblationVariant::L2, AblationVariant::L3, AblationVariant::L];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::L1 => "L1",
            AblationVariant::L2 => "L2",
            AblationVariant::L3 => "L3",
            AblationVariant::L => "L",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            AblationVariant::L1 => Architecture::Base,
            _ => Architecture::Cdhm,
        }
    }

    pub fn terms(self) -> TermMask {
        let (elbo, mmd, dis) = match self {
            AblationVariant::L1 => (false, false, false),
            AblationVariant::L2 => (false, true, false),
            AblationVariant::L3 => (true, false, false),
            AblationVariant::L => (true, true, true),
        };
        TermMask {
            elbo,
            mmd,
            dis,
            cls: true,
        }
    }

    /// Reference target accuracy on the CWRU→IMS task.
    pub fn reference_accuracy(self) -> f64 {
        match self {
            AblationVariant::L1 => 68.75,
            AblationVariant::L2 => 78.68,
            AblationVariant::L3 => 76.89,
            AblationVariant::L => 89.65,
        }
    }

    /// Reference ordering, worst first.
    pub fn reference_ranking() -> Vec<String> {
        ["L1", "L3", "L2", "L"].iter().map(|s| s.to_string()).collect()
    }
}

/// Split and prepared sequences of both domains. Target training items carry
/// no labels.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub source_train: Vec<PreparedSequence>,
    pub source_test: Vec<PreparedSequence>,
    pub target_train: Vec<PreparedSequence>,
    pub target_test: Vec<PreparedSequence>,
}

fn load_raw(cfg: &ExperimentConfig) -> Result<(Vec<LabeledSignal>, Vec<LabeledSignal>)> {
    let (mut s, mut t) = match &cfg.data {
        DataSpec::Synthetic { source, target, per_class } => (synth_dataset(source, *per_class)?, synth_dataset(target, *per_class)?),
        DataSpec::Manifest { source, target } => (load_manifest(source)?, load_manifest(target)?),
    };
    s.iter_mut().for_each(|x| x.domain = Domain::Source);
    t.iter_mut().for_each(|x| x.domain = Domain::Target);
    Ok((s, t))
}

fn split(cfg: &ExperimentConfig, items: &[LabeledSignal], domain: u64) -> Result<(Vec<LabeledSignal>, Vec<LabeledSignal>)> {
    split_train_test(items, cfg.split_ratio, mix(cfg.split_seed, &[domain]))
}

pub fn prepare_experiment_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    cfg.validate()?;
    let (s, t) = load_raw(cfg)?;
    let (s_train, s_test) = split(cfg, &s, 0)?;
    let (t_train, t_test) = split(cfg, &t, 1)?;
    let p = &cfg.pipeline;
    Ok(ExperimentData {
        source_train: p.prepare(&s_train)?,
        source_test: p.prepare(&s_test)?,
        target_train: p.prepare(&t_train)?.into_iter().map(PreparedSequence::unlabeled).collect(),
        target_test: p.prepare(&t_test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub target_accuracy: f64,
    pub source_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub steps: u64,
    /// Digest of the first source and target batch composition.
    pub first_batch_hash: String,
    pub final_total_loss: Option<f64>,
    pub history: Option<PathBuf>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task_id: String,
    pub variant: String,
    pub architecture: Architecture,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub runs: Vec<RunResult>,
    pub reference_accuracy: Option<f64>,
    pub reference_ranking: Option<Vec<String>>,
    pub config: ExperimentConfig,
    pub version: String,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn digest(parts: &[&[usize]]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &i in p.iter() {
            for b in (i as u64).to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h = (h ^ 0xff).wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Trained {
    trainer: Trainer,
    result: RunResult,
}

fn train_one(
    cfg: &ExperimentConfig,
    arch: Architecture,
    terms: TermMask,
    seed: u64,
    train_s: &[PreparedSequence],
    train_t: &[PreparedSequence],
    val_s: &[PreparedSequence],
    out: Option<&Path>,
    plot: bool,
) -> Result<Trained> {
    let started = Instant::now();
    let train_cfg = TrainConfig {
        seed,
        terms,
        ..cfg.train.clone()
    };
    let net = Network::new(arch, cfg.model.clone(), SeedPlan::new(seed).init)?;
    let mut trainer = Trainer::new(net, train_cfg)?;
    let (bs, bt) = trainer.batch_indices(0, train_s.len(), train_t.len());
    let first_batch_hash = digest(&[&bs, &bt]);
    let validation = cfg.source_validation.then_some(val_s);
    let history = trainer.fit_with_validation(train_s, train_t, validation, out)?;
    if let (true, Some(dir)) = (plot, out) {
        write_text(&dir.join("loss.svg"), &loss_curve_svg(&history))?;
    }
    let source_accuracy = evaluate(&trainer.net, val_s)?.accuracy;
    Ok(Trained {
        result: RunResult {
            seed,
            target_accuracy: 0.0,
            source_accuracy,
            confusion: ConfusionMatrix::new(cfg.model.num_classes),
            steps: trainer.step,
            first_batch_hash,
            final_total_loss: history.last().map(|r| r.loss.total),
            history: out.map(|d| d.join(crate::train::HISTORY_FILE)),
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
        trainer,
    })
}

fn run_variant(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    variant: AblationVariant,
    out: Option<&Path>,
    plot: bool,
) -> Result<ExperimentReport> {
    let mut runs = Vec::new();
    let mut confusion = ConfusionMatrix::new(cfg.model.num_classes);
    for &seed in &cfg.seeds {
        let dir = out.map(|d| d.join(format!("seed{seed}")));
        let mut t = train_one(
            cfg,
            variant.architecture(),
            variant.terms(),
            seed,
            &data.source_train,
            &data.target_train,
            &data.source_test,
            dir.as_deref(),
            plot,
        )?;
        let ev = evaluate(&t.trainer.net, &data.target_test)?;
        log::info!("{} seed {seed}: target accuracy {:.2}%", variant.name(), ev.accuracy);
        confusion.merge(&ev.confusion)?;
        t.result.target_accuracy = ev.accuracy;
        t.result.confusion = ev.confusion;
        runs.push(t.result);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.target_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let report = ExperimentReport {
        task_id: cfg.task_id(),
        variant: variant.name().into(),
        architecture: variant.architecture(),
        repeats: runs.len(),
        seeds: cfg.seeds.clone(),
        mean_accuracy: mean,
        std_accuracy: std,
        confusion,
        runs,
        reference_accuracy: None,
        reference_ranking: None,
        config: cfg.clone(),
        version: VERSION.into(),
    };
    if let Some(dir) = out {
        write_text(&dir.join("confusion.csv"), &confusion_csv(&report.confusion))?;
        if plot {
            write_text(&dir.join("confusion.svg"), &confusion_svg(&report.confusion))?;
        }
    }
    Ok(report)
}

/// Trains `variant` once per seed on source (labeled) plus target
/// (unlabeled) and scores the target test split.
pub fn run_transfer(cfg: &ExperimentConfig, variant: AblationVariant, out: Option<&Path>, plot: bool) -> Result<ExperimentReport> {
    let data = prepare_experiment_data(cfg)?;
    let mut report = run_variant(cfg, &data, variant, out, plot)?;
    report.reference_accuracy = cfg.reference_accuracy;
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

/// One report per loss set, all on identical data and seeds.
pub fn run_ablation(cfg: &ExperimentConfig, out: Option<&Path>, plot: bool) -> Result<Vec<ExperimentReport>> {
    let data = prepare_experiment_data(cfg)?;
    let mut reports = Vec::new();
    for v in AblationVariant::ALL {
        let dir = out.map(|d| d.join(v.name()));
        let mut r = run_variant(cfg, &data, v, dir.as_deref(), plot)?;
        r.reference_accuracy = Some(v.reference_accuracy());
        r.reference_ranking = Some(AblationVariant::reference_ranking());
        if let Some(d) = &dir {
            write_json(&d.join("report.json"), &r)?;
        }
        reports.push(r);
    }
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &reports)?;
        if plot {
            let bars = Series {
                name: "mean target accuracy".into(),
                points: reports.iter().enumerate().map(|(i, r)| (i as f64, r.mean_accuracy)).collect(),
            };
            write_text(&dir.join("ablation.svg"), &line_chart_svg("ablation (L1, L2, L3, L)", "variant", "accuracy %", &[bars]))?;
        }
    }
    Ok(reports)
}

/// Accuracy against test-time SNR for one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrSeries {
    pub variant: String,
    pub clean_accuracy: Vec<f64>,
    /// `accuracy[seed][snr]`.
    pub accuracy: Vec<Vec<f64>>,
    pub mean_accuracy: Vec<f64>,
    pub std_accuracy: Vec<f64>,
    pub spearman: Vec<f64>,
    pub mean_spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrSweepReport {
    pub task_id: String,
    pub snr_db: Vec<f64>,
    pub seeds: Vec<u64>,
    pub series: Vec<SnrSeries>,
    pub config: ExperimentConfig,
    pub version: String,
}

fn noisy_copies(cfg: &ExperimentConfig, test: &[LabeledSignal], snr: f64) -> Result<Vec<LabeledSignal>> {
    test.iter()
        .enumerate()
        .map(|(i, item)| {
            let seed = mix(cfg.split_seed, &[0x5e7, i as u64, snr.to_bits()]);
            let samples = add_noise_at_snr(&item.signal.samples, snr, seed)?;
            Ok(LabeledSignal {
                signal: RawSignal::new(samples, item.signal.sample_rate, item.signal.source_id.clone())?,
                ..item.clone()
            })
        })
        .collect()
}

/// Trains on clean source-domain data (the training split serves as both
/// domains) and scores noise-injected copies of the test split at every SNR.
pub fn run_snr_sweep(cfg: &ExperimentConfig, out: Option<&Path>, plot: bool) -> Result<SnrSweepReport> {
    cfg.validate()?;
    if cfg.snr_db.is_empty() {
        return Err(Error::Config("snr_db must not be empty".into()));
    }
    let (raw, _) = load_raw(cfg)?;
    let (train_raw, test_raw) = split(cfg, &raw, 0)?;
    let p = &cfg.pipeline;
    let train = p.prepare(&train_raw)?;
    let unlabeled: Vec<PreparedSequence> = train.iter().cloned().map(PreparedSequence::unlabeled).collect();
    let clean_test = p.prepare(&test_raw)?;
    let noisy_tests = cfg
        .snr_db
        .iter()
        .map(|&snr| p.prepare(&noisy_copies(cfg, &test_raw, snr)?))
        .collect::<Result<Vec<_>>>()?;
    let mut variants = vec![AblationVariant::L];
    if cfg.snr_compare_base {
        variants.push(AblationVariant::L1);
    }
    let mut series = Vec::new();
    for v in variants {
        let mut clean = Vec::new();
        let mut acc = Vec::new();
        let mut rho = Vec::new();
        for &seed in &cfg.seeds {
            let dir = out.map(|d| d.join(v.name()).join(format!("seed{seed}")));
            let t = train_one(cfg, v.architecture(), v.terms(), seed, &train, &unlabeled, &clean_test, dir.as_deref(), plot)?;
            clean.push(t.result.source_accuracy);
            let per_snr = noisy_tests
                .iter()
                .map(|test| Ok(evaluate(&t.trainer.net, test)?.accuracy))
                .collect::<Result<Vec<f64>>>()?;
            log::info!("snr sweep {} seed {seed}: {per_snr:?}", v.name());
            rho.push(spearman(&cfg.snr_db, &per_snr));
            acc.push(per_snr);
        }
        let (mean_accuracy, std_accuracy): (Vec<f64>, Vec<f64>) = (0..cfg.snr_db.len())
            .map(|j| mean_std(&acc.iter().map(|a| a[j]).collect::<Vec<_>>()))
            .unzip();
        series.push(SnrSeries {
            variant: v.name().into(),
            clean_accuracy: clean,
            accuracy: acc,
            mean_accuracy,
            std_accuracy,
            mean_spearman: rho.iter().sum::<f64>() / rho.len() as f64,
            spearman: rho,
        });
    }
    let report = SnrSweepReport {
        task_id: cfg.task_id.clone().unwrap_or_else(|| "snr-sweep".into()),
        snr_db: cfg.snr_db.clone(),
        seeds: cfg.seeds.clone(),
        series,
        config: cfg.clone(),
        version: VERSION.into(),
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
        for s in &report.series {
            write_text(
                &dir.join(format!("snr_{}.csv", s.variant)),
                &snr_csv(&report.snr_db, &s.mean_accuracy, &s.std_accuracy),
            )?;
        }
        if plot {
            let lines: Vec<Series> = report
                .series
                .iter()
                .map(|s| Series {
                    name: s.variant.clone(),
                    points: report.snr_db.iter().copied().zip(s.mean_accuracy.iter().copied()).collect(),
                })
                .collect();
            write_text(&dir.join("snr.svg"), &line_chart_svg("accuracy vs SNR", "SNR (dB)", "accuracy %", &lines))?;
        }
    }
    Ok(report)
}
