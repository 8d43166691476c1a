//! `tssl`: pretraining, evaluation and report emission for trust-gated
//! selective-invariance SSL.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trust_ssl::eval::{Detector, OodShift};
use trust_ssl::objective::Variant;
use trust_ssl_cli::config::ExperimentConfig;
use trust_ssl_cli::{commands, Usage};

#[derive(Parser, Debug)]
#[command(name = "tssl", version, about = "Trust-gated selective-invariance SSL at desk scale")]
struct Cli {
    /// Experiment config (JSON); omitted keys take the documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; replaces the training, probe and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (TSSL_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the configured variant; writes checkpoints, metrics and a manifest.
    Pretrain {
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen features; writes probe.json.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (as written by gen-data); defaults to the config's dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// 9×5 corruption grid plus the clean column; writes grid.csv.
    CorruptEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Conflict and ignorance per corruption cell; writes ki_trace.json and ki_trace.csv.
    KiTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// OOD detector scores and AUROC; writes ood.json and ood_auroc.csv.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated: haze, rain, darken, hue_rotate.
        #[arg(long, value_delimiter = ',')]
        shifts: Vec<String>,
        /// Comma-separated: mahalanobis, energy, feature_norm, native_ki.
        #[arg(long, value_delimiter = ',')]
        detectors: Vec<String>,
    },
    /// Write the configured synthetic train/test splits.
    GenData,
    /// Signed per-cell difference `candidate - baseline` of two grids.
    DiffGrids { baseline: PathBuf, candidate: PathBuf },
}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let threads = match std::env::var("TSSL_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Usage(format!("TSSL_THREADS={v:?} is not a thread count")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(cli.threads)?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Command::Pretrain { variant, epochs, .. } = &cli.command {
        if let Some(v) = variant {
            cfg.train.variant = Variant::from_name(v).map_err(|e| Usage(e.to_string()))?;
        }
        if let Some(e) = epochs {
            cfg.train.epochs = *e;
        }
    }
    let cfg = cfg.resolve(cli.seed, cli.out)?;
    match cli.command {
        Command::Pretrain { resume, .. } => commands::pretrain(&cfg, resume.as_deref()),
        Command::Probe { checkpoint, data } => commands::probe(&cfg, &checkpoint, data.as_deref()),
        Command::CorruptEval { checkpoint, data } => commands::corrupt_eval(&cfg, &checkpoint, data.as_deref()),
        Command::KiTrace { checkpoint, data } => commands::ki_trace(&cfg, &checkpoint, data.as_deref()),
        Command::Ood {
            checkpoint,
            data,
            shifts,
            detectors,
        } => {
            let shifts = if shifts.is_empty() {
                cfg.eval.ood_shifts.clone()
            } else {
                shifts.iter().map(|s| OodShift::from_name(s)).collect::<Result<_, _>>()?
            };
            let detectors = if detectors.is_empty() {
                cfg.eval.detectors.clone()
            } else {
                detectors.iter().map(|s| Detector::from_name(s)).collect::<Result<_, _>>()?
            };
            commands::ood(&cfg, &checkpoint, data.as_deref(), &shifts, &detectors)
        }
        Command::GenData => commands::gen_data(&cfg),
        Command::DiffGrids { baseline, candidate } => commands::diff_grids(&cfg, &baseline, &candidate).map(|_| ()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<trust_ssl::Error>() {
            use trust_ssl::Error as E;
            return match e {
                E::Config(_) | E::NoEvidentialHeads(_) | E::Checkpoint(_) | E::Json(_) => 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
