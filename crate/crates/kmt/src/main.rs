use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kmt::config::{ExperimentConfig, Overrides};
use kmt::stages::RunContext;
use kmt::sweep::SweepAxis;
use kmt_core::error::{Error, Result};

/// Synthetic-biography knowledge testbed: generate a closed-world corpus and
/// QA task grid, train a small transformer from scratch, and measure which
/// knowledge manipulations it can perform.
#[derive(Parser)]
#[command(name = "kmt", version, disable_help_subcommand = true)]
struct Cli {
    /// Experiment config file (.toml or .json).
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory (overrides KMT_OUT and the config's out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Master seed (overrides KMT_SEED and the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Mark the run deterministic in the manifest (numerics are always
    /// deterministic; this only annotates the record).
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample the person population and render biography entries.
    GenCorpus,
    /// Emit QA examples for the task grid and build the vocabulary.
    GenTasks,
    /// Train on biography text alone.
    Pretrain,
    /// Train on biographies and QA text mixed from scratch.
    MixedTrain,
    /// LoRA-finetune a frozen base checkpoint on QA text.
    Finetune,
    /// Decode and score a trained stage on the configured split.
    Evaluate {
        /// Stage to evaluate: pretrain, mixed, or finetune (default: the
        /// most advanced stage present).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Consolidate evaluation reports into summary.csv and re-render sweep
    /// tables and charts.
    Report,
    /// Run the full pipeline once per value of one axis.
    Sweep {
        /// Axis to sweep: train_set_size, augmentation, or qa_ratio.
        #[arg(long)]
        axis: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| Error::Config("--config <FILE> is required".into()))?;
    let overrides = Overrides::from_env_and_cli(cli.out, cli.seed, cli.deterministic)?;
    let deterministic = overrides.deterministic;
    let cfg = ExperimentConfig::load(&config_path, &overrides)?;
    let mut ctx = RunContext::open(cfg, deterministic)?;
    match cli.cmd {
        Cmd::GenCorpus => ctx.gen_corpus(),
        Cmd::GenTasks => ctx.gen_tasks(),
        Cmd::Pretrain => ctx.pretrain(),
        Cmd::MixedTrain => ctx.mixed_train(),
        Cmd::Finetune => ctx.finetune(),
        Cmd::Evaluate { stage } => ctx.evaluate(stage.as_deref()).map(|_| ()),
        Cmd::Report => ctx.report(),
        Cmd::Sweep { axis } => {
            let axis: SweepAxis = axis.parse()?;
            kmt::sweep::run_sweep(&mut ctx, axis).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
