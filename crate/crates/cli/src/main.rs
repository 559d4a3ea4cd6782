mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdhm::eval::{
    confusion_csv, confusion_svg, evaluate, prepare_experiment_data, run_ablation, run_snr_sweep, run_transfer, write_json,
    AblationVariant, ConfusionMatrix, DataSpec, ExperimentConfig, VERSION,
};
use cdhm::model::{Architecture, Network};
use cdhm::seed::SeedPlan;
use cdhm::signal::io::{read_f32_le, read_csv_column, read_meta, write_dataset};
use cdhm::signal::{synth_dataset, Domain, LabeledSignal, RawSignal};
use cdhm::train::{inspect_checkpoint, load_checkpoint, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Preset;
use crate::error::CliError;

/// Output root used when `--out` is absent.
const OUT_ROOT_ENV: &str = "CDHM_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "cdhm", version, about = "Cross-domain bearing fault diagnosis experiments", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (JSON), merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base configuration the file and overrides apply to.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Run directory. Defaults to `$CDHM_OUT_ROOT/<subcommand>`, else `runs/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed. Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key=value` applied after the config file; `key` is a dotted path or a unique field name.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,

    /// Require bit-reproducible execution.
    #[arg(long, global = true)]
    strict_deterministic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    L1,
    L2,
    L3,
    L,
}

impl From<Variant> for AblationVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::L1 => AblationVariant::L1,
            Variant::L2 => AblationVariant::L2,
            Variant::L3 => AblationVariant::L3,
            Variant::L => AblationVariant::L,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured synthetic source and target datasets.
    SynthData,
    /// Convert CSV or raw f32 signals into a dataset directory with a manifest.
    Import(ImportArgs),
    /// Train one network on the configured transfer task.
    Train {
        #[arg(long, value_enum, default_value_t = Variant::L)]
        variant: Variant,
        /// Continue from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the configured test splits.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score one loss set once per seed.
    Transfer {
        #[arg(long, value_enum, default_value_t = Variant::L)]
        variant: Variant,
    },
    /// Run the L1, L2, L3 and L loss sets on identical data and seeds.
    Ablate,
    /// Train on clean data and score noise-injected test copies.
    SnrSweep,
    /// Print the tensors and configuration stored in a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Args, Debug)]
struct ImportArgs {
    /// Signal files (`.csv` one column, anything else raw little-endian f32).
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Sample rate for files without a sidecar.
    #[arg(long)]
    sample_rate: Option<f64>,
    /// Fault class for files without a sidecar.
    #[arg(long)]
    label: Option<usize>,
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Import(_) => "import",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Transfer { .. } => "transfer",
            Command::Ablate => "ablate",
            Command::SnrSweep => "snr-sweep",
            Command::InspectCheckpoint { .. } => "inspect-checkpoint",
        }
    }
}

#[derive(Serialize)]
struct RunStamp<'a> {
    command: &'a str,
    version: &'a str,
    seeds: &'a [u64],
    seed_plans: Vec<SeedPlan>,
    strict_deterministic: bool,
}

#[derive(Serialize)]
struct TrainReport {
    task_id: String,
    variant: String,
    architecture: Architecture,
    seed: u64,
    steps: u64,
    learning_rate: f64,
    batch_size: usize,
    final_total_loss: Option<f64>,
    source_accuracy: f64,
    target_accuracy: f64,
    confusion: ConfusionMatrix,
    version: String,
}

#[derive(Serialize)]
struct EvaluationReport {
    task_id: String,
    checkpoint: PathBuf,
    architecture: Architecture,
    step: u64,
    source_accuracy: f64,
    target_accuracy: f64,
    confusion: ConfusionMatrix,
    version: String,
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("runs").join(command),
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(path.display().to_string(), e))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = config::load(common.preset, common.config.as_deref(), &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
    }
    if common.strict_deterministic {
        cfg.train.strict_deterministic = true;
    }
    Ok(cfg)
}

/// Config echo, seed record and version stamp.
fn stamp(dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<(), CliError> {
    create_dir(dir)?;
    write_text(&dir.join("config.json"), &config::to_pretty(cfg))?;
    let run = RunStamp {
        command,
        version: VERSION,
        seeds: &cfg.seeds,
        seed_plans: cfg.seeds.iter().map(|&s| SeedPlan::new(s)).collect(),
        strict_deterministic: cfg.train.strict_deterministic,
    };
    write_json(&dir.join("run.json"), &run)?;
    write_text(&dir.join("VERSION"), &format!("cdhm {VERSION}\n"))?;
    Ok(())
}

fn synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let DataSpec::Synthetic { source, target, per_class } = &cfg.data else {
        return Err(CliError::ConfigKey {
            key: "data.kind".into(),
            detail: "synth-data needs a synthetic data spec".into(),
        });
    };
    for (name, spec) in [("source", source), ("target", target)] {
        let items = synth_dataset(spec, *per_class)?;
        let manifest = write_dataset(&out.join(name), &items)?;
        println!("{name}: {} signals, manifest {}", items.len(), manifest.display());
    }
    Ok(())
}

fn import(args: &ImportArgs, out: &Path) -> Result<(), CliError> {
    let mut items = Vec::new();
    for path in &args.files {
        let samples = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => read_csv_column(path)?,
            _ => read_f32_le(path)?,
        };
        let meta = read_meta(path).ok();
        let id = path.file_stem().map_or_else(|| "signal".into(), |s| s.to_string_lossy().into_owned());
        let sample_rate = args.sample_rate.or(meta.as_ref().map(|m| m.sample_rate)).ok_or_else(|| {
            CliError::Usage(format!("{}: no sidecar; pass --sample-rate", path.display()))
        })?;
        let domain = match args.domain {
            Some(DomainArg::Source) => Domain::Source,
            Some(DomainArg::Target) => Domain::Target,
            None => meta.as_ref().map_or(Domain::Source, |m| m.domain),
        };
        items.push(LabeledSignal {
            signal: RawSignal::new(samples, sample_rate, meta.as_ref().map_or(id, |m| m.source_id.clone()))?,
            label: args.label.or(meta.as_ref().and_then(|m| m.label)),
            domain,
        });
    }
    let manifest = write_dataset(out, &items)?;
    println!("imported {} signals, manifest {}", items.len(), manifest.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, variant: AblationVariant, resume: Option<&Path>, out: &Path, plot: bool) -> Result<(), CliError> {
    let data = prepare_experiment_data(cfg)?;
    let seed = cfg.seeds[0];
    let mut trainer = match resume {
        Some(path) => {
            let mut t = load_checkpoint(path)?;
            t.cfg.epochs = cfg.train.epochs;
            t.cfg.max_steps = cfg.train.max_steps;
            t
        }
        None => {
            let train_cfg = TrainConfig {
                seed,
                terms: variant.terms(),
                ..cfg.train.clone()
            };
            let net = Network::new(variant.architecture(), cfg.model.clone(), SeedPlan::new(seed).init)?;
            Trainer::new(net, train_cfg)?
        }
    };
    let validation = cfg.source_validation.then_some(&data.source_test[..]);
    let history = trainer.fit_with_validation(&data.source_train, &data.target_train, validation, Some(out))?;
    if plot {
        write_text(&out.join("loss.svg"), &cdhm::eval::loss_curve_svg(&history))?;
    }
    let target = evaluate(&trainer.net, &data.target_test)?;
    let source = evaluate(&trainer.net, &data.source_test)?;
    let report = TrainReport {
        task_id: cfg.task_id(),
        variant: variant.name().into(),
        architecture: trainer.net.architecture(),
        seed: trainer.cfg.seed,
        steps: trainer.step,
        learning_rate: trainer.cfg.learning_rate,
        batch_size: trainer.cfg.batch_size,
        final_total_loss: history.last().map(|r| r.loss.total),
        source_accuracy: source.accuracy,
        target_accuracy: target.accuracy,
        confusion: target.confusion,
        version: VERSION.into(),
    };
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("confusion.csv"), &confusion_csv(&report.confusion))?;
    println!(
        "{} {}: {} steps, source {:.2}%, target {:.2}%",
        report.task_id, report.variant, report.steps, report.source_accuracy, report.target_accuracy
    );
    Ok(())
}

fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path, plot: bool) -> Result<(), CliError> {
    let trainer = load_checkpoint(checkpoint)?;
    let model = trainer.net.config();
    if model.window_len != cfg.pipeline.window_len || model.resolution != cfg.pipeline.resolution {
        return Err(CliError::ConfigKey {
            key: "pipeline".into(),
            detail: format!(
                "checkpoint expects window_len {} and resolution {}, config has {} and {}",
                model.window_len, model.resolution, cfg.pipeline.window_len, cfg.pipeline.resolution
            ),
        });
    }
    let data = prepare_experiment_data(&ExperimentConfig {
        model: model.clone(),
        ..cfg.clone()
    })?;
    let target = evaluate(&trainer.net, &data.target_test)?;
    let source = evaluate(&trainer.net, &data.source_test)?;
    let report = EvaluationReport {
        task_id: cfg.task_id(),
        checkpoint: checkpoint.to_path_buf(),
        architecture: trainer.net.architecture(),
        step: trainer.step,
        source_accuracy: source.accuracy,
        target_accuracy: target.accuracy,
        confusion: target.confusion,
        version: VERSION.into(),
    };
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("confusion.csv"), &confusion_csv(&report.confusion))?;
    if plot {
        write_text(&out.join("confusion.svg"), &confusion_svg(&report.confusion))?;
    }
    println!("source {:.2}%, target {:.2}%", report.source_accuracy, report.target_accuracy);
    Ok(())
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let info = inspect_checkpoint(path)?;
    let trainer = load_checkpoint(path)?;
    let store = trainer.net.store();
    println!("checkpoint {}", path.display());
    println!("format_version {}", info.format_version);
    println!("architecture {}", serde_json::to_value(info.architecture).map_err(cdhm::Error::from)?.as_str().unwrap_or("?"));
    println!("step {}", info.step);
    println!("parameters:");
    let mut total = 0;
    for (_, e) in store.entries() {
        let n = e.value.numel();
        total += n;
        let kind = if e.kind.trainable() { "" } else { " (buffer)" };
        println!("  {:<44} {:?} {n}{kind}", e.name, e.value.shape());
    }
    println!("total parameters: {} (trainable {})", total, info.num_trainable);
    println!("model_config: {}", serde_json::to_string(&info.model_config).map_err(cdhm::Error::from)?);
    println!("train_config: {}", serde_json::to_string(&info.train_config).map_err(cdhm::Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    if let Command::InspectCheckpoint { path } = &cli.command {
        return inspect(path);
    }
    let out = out_dir(&cli.common, name);
    if let Command::Import(args) = &cli.command {
        create_dir(&out)?;
        return import(args, &out);
    }
    let cfg = load_config(&cli.common)?;
    stamp(&out, name, &cfg)?;
    let plot = cli.common.plot;
    match &cli.command {
        Command::SynthData => synth_data(&cfg, &out),
        Command::Train { variant, resume } => train(&cfg, (*variant).into(), resume.as_deref(), &out, plot),
        Command::Evaluate { checkpoint } => evaluate_checkpoint(&cfg, checkpoint, &out, plot),
        Command::Transfer { variant } => {
            let r = run_transfer(&cfg, (*variant).into(), Some(&out), plot)?;
            println!("{} {}: target accuracy {:.2} ± {:.2}%", r.task_id, r.variant, r.mean_accuracy, r.std_accuracy);
            Ok(())
        }
        Command::Ablate => {
            for r in run_ablation(&cfg, Some(&out), plot)? {
                println!("{:>3}: {:.2} ± {:.2}% (reference {:.2})", r.variant, r.mean_accuracy, r.std_accuracy, r.reference_accuracy.unwrap_or(f64::NAN));
            }
            Ok(())
        }
        Command::SnrSweep => {
            let r = run_snr_sweep(&cfg, Some(&out), plot)?;
            for s in &r.series {
                println!("{}: spearman {:.3}", s.variant, s.mean_spearman);
                for (snr, acc) in r.snr_db.iter().zip(&s.mean_accuracy) {
                    println!("  {snr:>6} dB  {acc:.2}%");
                }
            }
            Ok(())
        }
        Command::Import(_) | Command::InspectCheckpoint { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
