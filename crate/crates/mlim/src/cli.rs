//! Command-line entry point.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use mlim_core::config::RunConfig;

use crate::error::{AppError, AppResult};
use crate::pipeline;
use crate::settings;

#[derive(Debug, Parser)]
#[command(name = "mlim", version, about = "Masked language and image modeling on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and the MLIM_SEED environment variable.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for the timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FromCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint to start from; falls back to `checkpoint` in the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus (PPM images + manifest) and the pair files.
    GenData(Common),
    /// Pre-train from scratch and write a checkpoint and training log.
    Pretrain(Common),
    /// Fine-tune a pre-trained checkpoint on the pair task.
    Finetune(FromCheckpoint),
    /// Run the cross-modality probes on a checkpoint.
    Probe(FromCheckpoint),
    /// Run the loss/masking/modality-dropout ablation matrix.
    Ablate(Common),
    /// Re-render CSV/SVG reports from an earlier probe or ablation run.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory holding probe.json and/or ablation.json.
        #[arg(long)]
        from: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Probe(_) => "probe",
            Command::Ablate(_) => "ablate",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::Ablate(c) => c,
            Command::Finetune(f) | Command::Probe(f) => &f.common,
            Command::Report { common, .. } => common,
        }
    }
}

fn checkpoint_path(flag: &Option<PathBuf>, cfg: &RunConfig) -> AppResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.checkpoint.as_ref().map(PathBuf::from))
        .ok_or_else(|| AppError::Config("no checkpoint given (use --checkpoint or the `checkpoint` config key)".into()))
}

fn init_threads(threads: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
}

/// Runs one invocation; returns the run directory.
pub fn run(cli: &Cli) -> AppResult<PathBuf> {
    let common = cli.command.common();
    let mut cfg = settings::resolve(common.config.as_deref(), common.seed)?;
    let from = match &cli.command {
        Command::Finetune(f) | Command::Probe(f) => {
            let p = checkpoint_path(&f.checkpoint, &cfg)?;
            cfg.checkpoint = Some(p.display().to_string());
            Some(p)
        }
        _ => None,
    };
    init_threads(cfg.threads);
    let dir = pipeline::create_run_dir(&common.out, cli.command.name(), &cfg)?;
    info!("{} run in {}", cli.command.name(), dir.display());
    match &cli.command {
        Command::GenData(_) => pipeline::gen_data(&cfg, &dir)?,
        Command::Pretrain(_) => {
            pipeline::pretrain(&cfg, &dir)?;
        }
        Command::Finetune(_) => {
            pipeline::finetune(&cfg, from.as_deref().expect("resolved above"), &dir)?;
        }
        Command::Probe(_) => {
            pipeline::probe(&cfg, from.as_deref().expect("resolved above"), &dir)?;
        }
        Command::Ablate(_) => {
            pipeline::ablate(&cfg, &dir)?;
        }
        Command::Report { from, .. } => {
            pipeline::report(Path::new(from), &dir)?;
        }
    }
    Ok(dir)
}

/// Parses `args`, runs, and maps the outcome to an exit code: 0 success,
/// 1 configuration or usage error, 2 runtime failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
