mod commands;
mod config;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use config::RunConfig;

/// A failure reported as `error: kind=<kind> msg=<msg>` with exit code 1.
#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: &'static str,
    pub msg: String,
}

impl CliError {
    pub fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        Self { kind, msg: msg.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }

    pub fn line(&self) -> String {
        let msg: String = self.msg.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        format!("error: kind={} msg={msg}", self.kind)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<odorcnn::Error> for CliError {
    fn from(e: odorcnn::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "odorcnn", version, about = "Odor-presence decoding from multichannel LFP trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML file with dotted keys; a run's config.toml or run.toml also works
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.max_epochs=20 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (below $ODORCNN_OUTPUT_ROOT when relative and set)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw dataset
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of trials
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        channels: Option<usize>,
        /// Samples per channel
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        sample_rate: Option<f64>,
        /// Fraction of odor trials
        #[arg(long)]
        class_balance: Option<f64>,
    },
    /// Build a raw dataset from an index CSV
    Import {
        #[command(flatten)]
        common: Common,
        /// Index CSV (trial_id,mouse_id,label,odorant,onset_offset_samples,sample_rate_hz,channels,file)
        #[arg(long)]
        index: PathBuf,
    },
    /// Filter, decimate and compute Welch spectra for a raw dataset
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        low_hz: Option<f64>,
        #[arg(long)]
        high_hz: Option<f64>,
        #[arg(long)]
        decimate: Option<usize>,
        #[arg(long)]
        nperseg: Option<usize>,
        #[arg(long)]
        overlap: Option<f64>,
        /// Expected channel count
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Train one model on one train/validation/test split
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        training: TrainArgs,
        #[arg(long, value_parser = ["attention", "res"])]
        arch: Option<String>,
        #[arg(long, value_parser = ["cosine_warm_restarts", "one_cycle"])]
        schedule: Option<String>,
        /// Which split of the k-fold plan to use
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Stratified k-fold cross-validation
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        training: TrainArgs,
        /// Train both architectures and fuse their probabilities per fold
        #[arg(long)]
        ensemble: bool,
        /// Architecture for single-model runs
        #[arg(long, value_parser = ["attention", "res"], conflicts_with = "ensemble")]
        arch: Option<String>,
        #[arg(long, value_parser = ["cosine_warm_restarts", "one_cycle"])]
        schedule: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Folds trained concurrently
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Score a checkpoint on a spectra dataset
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of a full model's gradients at 64-bit
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["attention", "res"])]
        arch: Option<String>,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Sampled coordinates per seed
        #[arg(long, default_value_t = 40)]
        coords: usize,
        /// Number of seeded instances
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
    },
    /// Write penultimate-layer features of every trial as CSV
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Summarize a dataset directory or a checkpoint
    Info {
        #[arg(long, required_unless_present = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
pub struct DataArg {
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<Value>)> {
        vec![
            ("train.max_epochs", self.epochs.map(int)),
            ("train.batch_size", self.batch_size.map(int)),
            ("train.lr_max", self.lr.map(Value::Float)),
            ("train.patience", self.patience.map(int)),
            ("train.precision", self.precision.clone().map(Value::String)),
        ]
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn build_config(common: &Common, flags: Vec<(&'static str, Option<Value>)>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.merge_file(&run::resolve_input(path))?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::new("invalid_config", "seed: exceeds the TOML integer range"))?;
        cfg.set("seed", Value::Integer(seed))?;
    }
    if let Some(out) = &common.out {
        cfg.set("out", path_value(out))?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn data_flag(d: &DataArg) -> (&'static str, Option<Value>) {
    ("data", d.data.as_deref().map(path_value))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    use commands::*;
    match command {
        Command::Synth { common, n, snr, channels, samples, sample_rate, class_balance } => {
            let cfg = build_config(
                &common,
                vec![
                    ("synth.n_trials", n.map(int)),
                    ("synth.snr", snr.map(Value::Float)),
                    ("synth.channels", channels.map(int)),
                    ("synth.samples", samples.map(int)),
                    ("synth.sample_rate_hz", sample_rate.map(Value::Float)),
                    ("synth.class_balance", class_balance.map(Value::Float)),
                ],
            )?;
            with_run("synth", &cfg, synth)
        }
        Command::Import { common, index } => {
            let cfg = build_config(&common, vec![])?;
            with_run("import", &cfg, |cfg, run| import(cfg, run, &index))
        }
        Command::Preprocess { common, data, order, low_hz, high_hz, decimate, nperseg, overlap, channels } => {
            let cfg = build_config(
                &common,
                vec![
                    data_flag(&data),
                    ("preprocess.order", order.map(int)),
                    ("preprocess.low_hz", low_hz.map(Value::Float)),
                    ("preprocess.high_hz", high_hz.map(Value::Float)),
                    ("preprocess.decimate", decimate.map(int)),
                    ("preprocess.nperseg", nperseg.map(int)),
                    ("preprocess.overlap", overlap.map(Value::Float)),
                    ("preprocess.channels", channels.map(int)),
                ],
            )?;
            with_run("preprocess", &cfg, preprocess)
        }
        Command::Train { common, data, training, arch, schedule, fold } => {
            let mut flags = vec![
                data_flag(&data),
                ("model.arch", arch.map(Value::String)),
                ("train.schedule", schedule.map(Value::String)),
                ("train.fold", fold.map(int)),
            ];
            flags.extend(training.overrides());
            let cfg = build_config(&common, flags)?;
            with_run("train", &cfg, train)
        }
        Command::Cv { common, data, training, ensemble, arch, schedule, k, jobs } => {
            let mut flags = vec![
                data_flag(&data),
                ("cv.ensemble", ensemble.then_some(Value::Boolean(true))),
                ("model.arch", arch.map(Value::String)),
                ("train.schedule", schedule.map(Value::String)),
                ("cv.k", k.map(int)),
                ("cv.jobs", jobs.map(int)),
            ];
            flags.extend(training.overrides());
            let cfg = build_config(&common, flags)?;
            with_run("cv", &cfg, cross_validate)
        }
        Command::Evaluate { common, data, checkpoint } => {
            let cfg = build_config(&common, vec![data_flag(&data)])?;
            // fail before creating any output directory
            let ck = load_checkpoint(&run::resolve_input(&checkpoint))?;
            with_run("evaluate", &cfg, |cfg, run| evaluate(cfg, run, &checkpoint, &ck))
        }
        Command::Gradcheck { common, arch, batch, coords, seeds, h } => {
            let cfg = build_config(&common, vec![("model.arch", arch.map(Value::String))])?;
            gradcheck(&cfg, batch, coords, seeds, h)
        }
        Command::ExportFeatures { common, data, checkpoint } => {
            let cfg = build_config(&common, vec![data_flag(&data)])?;
            let ck = load_checkpoint(&run::resolve_input(&checkpoint))?;
            with_run("export-features", &cfg, |cfg, run| export(cfg, run, &ck))
        }
        Command::Info { data, checkpoint } => info(data.as_deref(), checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(1)
        }
    }
}
