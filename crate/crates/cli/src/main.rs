//! `posecast` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 runtime or
//! numerical failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use posecast::error::Error;
use posecast::gradcheck::{gradcheck_csv, run_gradcheck, GradOp};
use posecast::synth::{generate, read_dataset, write_dataset, SweepSize};
use posecast::train::{
    decoder_sweep, evaluate, load_checkpoint, save_checkpoint, sweep_csv, trace_to_csv, train, Decoder,
};

use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }

    /// Validation failures are configuration errors whatever their kind.
    pub fn from_validation(e: Error) -> Self {
        Self::config(e.to_string())
    }

    /// Failures reading user-supplied inputs.
    fn input(what: &Path, e: Error) -> Self {
        Self::config(format!("{}: {e}", what.display()))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Contract(_) | Error::Format { .. } | Error::Json(_) | Error::Range { .. } => {
                CliError::config(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "posecast", version, about = "Integral pose regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON experiment configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.steps=500`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a generated dataset
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by `gen`
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `model.ihpm` and `trace.csv`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `integral` or `argmax`
        #[arg(long, default_value = "integral")]
        decoder: String,
        /// Output directory for `report_<decoder>.json` and `.csv`
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random cases per op
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Flip the sign of one op's analytic gradient
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        /// Also write the table to this CSV file
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoder error across grid resolutions
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated square sizes, overriding `sweep.sizes`
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Output CSV file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(cfg: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(cfg.config.as_deref(), &cfg.overrides)
}

fn out_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| config.outputs.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::config("no output directory: pass --out or set outputs.dir"))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<PathBuf, CliError> {
    let synth = config.synth()?;
    if config.samples == 0 {
        return Err(CliError::config("samples must be positive"));
    }
    let samples = generate(synth, config.samples)?;
    create_dir(out)?;
    write_dataset(out, &samples, Some(synth)).map_err(|e| CliError::runtime(e.to_string()))
}

fn cmd_train(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let tc = config.train()?;
    let (_, samples) = read_dataset(data).map_err(|e| CliError::input(data, e))?;
    let outcome = train(tc, &samples)?;
    create_dir(out)?;
    save_checkpoint(&outcome.model, out.join("model.ihpm")).map_err(|e| CliError::runtime(e.to_string()))?;
    write(&out.join("trace.csv"), &trace_to_csv(&outcome.trace))?;
    log::info!("trained {} parameters for {} steps", outcome.model.parameter_count(), tc.steps);
    Ok(())
}

fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: &Path,
    data: &Path,
    decoder: Decoder,
    out: &Path,
) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint).map_err(|e| CliError::input(checkpoint, e))?;
    let (_, samples) = read_dataset(data).map_err(|e| CliError::input(data, e))?;
    let report = evaluate(&model, &samples, decoder, &config.metrics)?;
    create_dir(out)?;
    let stem = format!("report_{}", decoder.as_str());
    write(&out.join(format!("{stem}.json")), &report.to_json()?)?;
    write(&out.join(format!("{stem}.csv")), &report.to_csv())?;
    println!("mean_error,{}", posecast::table::sig9(report.mean_error));
    Ok(())
}

fn cmd_gradcheck(seed: u64, cases: usize, fault: Option<&str>, out: Option<&Path>) -> Result<(), CliError> {
    let fault = fault.map(str::parse::<GradOp>).transpose()?;
    let rows = run_gradcheck(seed, cases, fault)?;
    let table = gradcheck_csv(&rows);
    print!("{table}");
    if let Some(path) = out {
        write(path, &table)?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.op.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_sweep(config: &ExperimentConfig, sizes: Option<Vec<usize>>, out: &Path) -> Result<(), CliError> {
    let base = config.synth()?;
    let sizes = match sizes {
        Some(s) => s.into_iter().map(SweepSize::square).collect(),
        None => config.sweep.sizes.clone(),
    };
    if config.sweep.samples == 0 {
        return Err(CliError::config("sweep.samples must be positive"));
    }
    let rows = decoder_sweep(base, config.sweep.samples, &sizes, &config.metrics)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, &sweep_csv(&rows))
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("POSECAST_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("POSECAST_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen { cfg, out } => {
            let config = load(&cfg)?;
            let out = out_dir(out, &config)?;
            let manifest = cmd_gen(&config, &out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Train { cfg, data, out } => {
            let config = load(&cfg)?;
            let out = out_dir(out, &config)?;
            cmd_train(&config, &data, &out)
        }
        Command::Eval { cfg, checkpoint, data, decoder, out } => {
            let config = load(&cfg)?;
            let decoder: Decoder = decoder.parse()?;
            let out = out_dir(out, &config)?;
            cmd_eval(&config, &checkpoint, &data, decoder, &out)
        }
        Command::Gradcheck { seed, cases, inject_fault, out } => {
            cmd_gradcheck(seed, cases, inject_fault.as_deref(), out.as_deref())
        }
        Command::Sweep { cfg, sizes, out } => {
            let config = load(&cfg)?;
            let out = match out {
                Some(p) => p,
                None => out_dir(None, &config)?.join("sweep.csv"),
            };
            cmd_sweep(&config, sizes, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            ExitCode::from(e.code)
        }
    }
}
