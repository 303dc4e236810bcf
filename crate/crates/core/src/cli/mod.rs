//! The `sfbnet` command line: train, eval, gradcheck, bench and synth.

mod bench;
mod config;
mod data;
mod eval;
mod train;

pub use bench::{format_table, run_bench, BenchRow};
pub use config::{BenchConfig, DataConfig, Profile, RunConfig, DEFAULT_MEMORY_BUDGET, SEED_ENV};
pub use data::{load_dataset, Dataset, Split};
pub use eval::{evaluate, predict_labels, ClassDice, EvalOptions, EvalReport};
pub use train::{run_train, EpochLog, TrainSummary, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckReport};
use crate::model::{build_model, load_checkpoint, Precision, Variant};
use crate::pipeline::{derive_seed, phantom_set, write_split};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "sfbnet", version, about = "Swin filtering block U-Net: train, evaluate, check and benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration overlaid on the profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset the configuration starts from.
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    /// Override one configuration value, e.g. `--set model.window=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.profile, self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint plus a JSON-lines metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after the first epoch whose training Dice reaches this value.
        #[arg(long)]
        stop_at_dice: Option<f64>,
    },
    /// Per-class Dice of a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Average predictions over the four mirrored inputs.
        #[arg(long)]
        tta: bool,
        /// Keep only the largest connected foreground component.
        #[arg(long)]
        postprocess: bool,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Finite-difference gradient checks of every layer and the full model.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Parameter count, Gflops and throughput per model variant.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "full,no_sfb,no_trans")]
        variants: Vec<String>,
        /// Skip the timed passes and report costs only.
        #[arg(long)]
        no_timing: bool,
    },
    /// Write a synthetic phantom dataset in the RAWT layout.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

pub fn run(cli: Cli) -> ExitCode {
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json<S: serde::Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Train { cfg, stop_at_dice } => {
            let cfg = cfg.load()?;
            let summary = run_train(&cfg, stop_at_dice)?;
            print_json(&serde_json::json!({
                "steps": summary.steps,
                "epochs_run": summary.epochs_run,
                "final_loss": summary.final_loss,
                "final_train_dice": summary.final_train_dice,
                "final_train_mean_dice": summary.final_train_mean_dice,
                "checkpoint": summary.checkpoint,
                "metrics": summary.metrics,
                "seconds": summary.seconds,
            }))?;
            Ok(EXIT_OK)
        }
        Command::Eval {
            cfg,
            ckpt,
            tta,
            postprocess,
            split,
        } => {
            let cfg = cfg.load()?;
            let report = run_eval(&cfg, &ckpt, EvalOptions { tta, postprocess }, split)?;
            let out = cfg.output_dir.join("eval.json");
            if std::fs::create_dir_all(&cfg.output_dir).is_ok() {
                std::fs::write(&out, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&out, e))?;
            }
            print_json(&report)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { cfg } => {
            let cfg = cfg.load()?;
            let report = run_gradcheck(&cfg.gradcheck_model, &cfg.gradcheck)?;
            print_gradcheck(&report)?;
            if report.passed() {
                Ok(EXIT_OK)
            } else {
                eprintln!("gradient check failed: {}", report.failures().join(", "));
                Ok(EXIT_CHECK_FAILED)
            }
        }
        Command::Bench {
            cfg,
            variants,
            no_timing,
        } => {
            let cfg = cfg.load()?;
            let variants = variants
                .iter()
                .map(|v| Variant::parse(v.trim()))
                .collect::<Result<Vec<_>>>()?;
            let rows = run_bench(&cfg, &variants, !no_timing)?;
            for r in &rows {
                print_json(r)?;
            }
            eprint!("{}", format_table(&rows));
            Ok(EXIT_OK)
        }
        Command::Synth { cfg, out } => {
            let cfg = cfg.load()?;
            let size = cfg.model.input_size;
            let train = phantom_set(derive_seed(cfg.seed, 1), cfg.data.synthetic_train, size)?;
            let val = phantom_set(derive_seed(cfg.seed, 2), cfg.data.synthetic_val, size)?;
            write_split(&out, "train", &train)?;
            write_split(&out, "val", &val)?;
            print_json(&serde_json::json!({"dir": out, "train": train.len(), "val": val.len()}))?;
            Ok(EXIT_OK)
        }
    }
}

fn print_gradcheck(report: &GradcheckReport) -> Result<()> {
    for c in &report.components {
        print_json(c)?;
    }
    print_json(&serde_json::json!({
        "passed": report.passed(),
        "worst_rel_err": report.worst(),
        "tolerance": report.tolerance,
        "components": report.components.len(),
        "seconds": report.seconds,
    }))
}

/// Loads `ckpt` into a model built from `cfg.model` and evaluates `split`.
/// A checkpoint that does not match the configuration is a
/// [`Error::Config`].
pub fn run_eval(cfg: &RunConfig, ckpt: &Path, opts: EvalOptions, split: Split) -> Result<EvalReport> {
    let data = load_dataset(cfg)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", split.name())));
    }
    match cfg.model.precision {
        Precision::F32 => {
            let mut m = build_model::<f32>(&cfg.model)?;
            load_checkpoint(&mut m, ckpt)?;
            evaluate(&mut m, samples, opts)
        }
        Precision::F64 => {
            let mut m = build_model::<f64>(&cfg.model)?;
            load_checkpoint(&mut m, ckpt)?;
            evaluate(&mut m, samples, opts)
        }
    }
}
