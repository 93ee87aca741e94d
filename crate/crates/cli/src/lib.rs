//! `anatomask` command line. Every subcommand resolves a TOML configuration
//! file plus flag overrides, snapshots the result as `config.toml` in its
//! output directory and then runs.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

mod ablate;
mod commands;
mod config;

pub use ablate::{
    cell_config, cells, cmd_ablate, rank, read_cell, write_summary, AblateCell, SummaryRow,
    PROBE_DIR, SUMMARY_CSV, SUMMARY_HEADER,
};
pub use commands::{
    cmd_eval, cmd_finetune, cmd_mask_stats, cmd_phantoms, cmd_pretrain, prepare_out,
    pretrained_params, Existing, FinetuneRuns, OverlapObservation, PretrainFlags, COMPARISON_CSV,
    EVAL_CSV, MASK_STATS_CSV, PROBE_PARAMS, RANDOM_DIR, SEG_REPORT_CSV, TRAIN_LOSS_CSV,
};
pub use config::{
    AblateSection, EvalSection, FileConfig, FinetuneSection, MaskStatsSection, PhantomsSection,
    Split, SNAPSHOT,
};

use anatomask::distill::{Direction, DistillError};
use anatomask::maskgen::Significance;
use anatomask::nnet::DecoderVariant;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Config(_) | DistillError::Resume(_) | DistillError::ClassMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            DistillError::Nn(anatomask::nnet::NnError::Config(_)) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    anatomask::nnet::NnError,
    anatomask::metrics::MetricsError,
    anatomask::maskgen::MaskError,
    anatomask::volume::VolumeError
);

#[derive(Debug, Parser)]
#[command(name = "anatomask", version, about = "Anatomy-aware masked image modelling at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for phantoms, pretraining and the probe.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArg {
    /// Phantom corpus directory (overrides `pretrain.corpus`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Hierarchical,
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SignificanceArg {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    EasyToHard,
    HardToEasy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom corpus.
    Phantoms {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Teacher/student pretraining. Several --gamma values run one
    /// sub-directory per ratio.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        gamma: Vec<f64>,
        /// Total epochs T of the mask schedule.
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long, value_enum)]
        decoder: Option<DecoderArg>,
        #[arg(long, value_enum)]
        self_distillation: Option<Toggle>,
        #[arg(long, value_enum)]
        significance: Option<SignificanceArg>,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
        /// Continue from the checkpoint in --out.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train the segmentation probe and report held-out DSC/NSD.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        /// Pretraining run directory or parameter file.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<u64>,
        /// Also train from random initialisation and compare.
        #[arg(long)]
        compare_random: bool,
    },
    /// Score a probe checkpoint or predicted label files.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, conflicts_with = "pred_dir")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Split>,
        /// Surface tolerance in voxels.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Replay a run's mask log against the labels.
    MaskStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        /// Pretraining run directory.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run the decoder x strategy x ratio matrix and rank the cells.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        probe_epochs: Option<u64>,
        /// Reuse finished cells and resume interrupted ones.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
}

fn base_config(common: &Common, fallback: Option<&Path>) -> Result<FileConfig, CliError> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => FileConfig::load(p)?,
        (None, Some(p)) if p.exists() => FileConfig::load(p)?,
        _ => FileConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn existing(common: &Common) -> Existing {
    if common.force {
        Existing::Force
    } else {
        Existing::Refuse
    }
}

/// Absolute form of a user path, so snapshots stay valid from any working
/// directory.
fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn set_corpus(cfg: &mut FileConfig, corpus: &CorpusArg) {
    if let Some(c) = &corpus.corpus {
        cfg.pretrain.corpus = c.clone();
    }
    if !cfg.pretrain.corpus.as_os_str().is_empty() {
        cfg.pretrain.corpus = absolute(&cfg.pretrain.corpus);
    }
}

fn gamma_dir(g: f64) -> String {
    format!("gamma-{g}")
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantoms { common, count } => {
            let mut cfg = base_config(&common, None)?;
            if let Some(n) = count {
                cfg.phantoms.count = n;
            }
            cmd_phantoms(&cfg, &common.out, existing(&common))?;
        }
        Command::Pretrain {
            common,
            corpus,
            gamma,
            epochs,
            decoder,
            self_distillation,
            significance,
            direction,
            resume,
            stop_after,
        } => {
            let fallback = resume.then(|| common.out.join(SNAPSHOT));
            let mut cfg = base_config(&common, fallback.as_deref())?;
            set_corpus(&mut cfg, &corpus);
            let p = &mut cfg.pretrain;
            if let Some(t) = epochs {
                p.schedule.total_epochs = t;
            }
            if let Some(d) = decoder {
                p.net.decoder = match d {
                    DecoderArg::Hierarchical => DecoderVariant::Hierarchical,
                    DecoderArg::Simple => DecoderVariant::Simple,
                };
            }
            if let Some(t) = self_distillation {
                p.strategy.self_distillation = t == Toggle::On;
            }
            if let Some(s) = significance {
                p.strategy.significance = match s {
                    SignificanceArg::High => Significance::High,
                    SignificanceArg::Low => Significance::Low,
                };
            }
            if let Some(d) = direction {
                p.strategy.direction = match d {
                    DirectionArg::EasyToHard => Direction::EasyToHard,
                    DirectionArg::HardToEasy => Direction::HardToEasy,
                };
            }
            let flags = PretrainFlags {
                existing: existing(&common),
                resume,
                stop_after,
            };
            match gamma.as_slice() {
                [] => {
                    cmd_pretrain(&cfg, &common.out, flags)?;
                }
                [g] => {
                    cfg.pretrain.gamma = *g;
                    cmd_pretrain(&cfg, &common.out, flags)?;
                }
                many => {
                    for &g in many {
                        let mut c = cfg.clone();
                        c.pretrain.gamma = g;
                        c.pretrain.validate()?;
                    }
                    for &g in many {
                        let mut c = cfg.clone();
                        c.pretrain.gamma = g;
                        cmd_pretrain(&c, &common.out.join(gamma_dir(g)), flags)?;
                    }
                }
            }
        }
        Command::Finetune {
            common,
            corpus,
            pretrained,
            epochs,
            compare_random,
        } => {
            let mut cfg = base_config(&common, None)?;
            set_corpus(&mut cfg, &corpus);
            if let Some(p) = pretrained {
                cfg.finetune.pretrained = Some(absolute(&p));
            }
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            cfg.finetune.compare_random |= compare_random;
            cmd_finetune(&cfg, &common.out, existing(&common))?;
        }
        Command::Eval {
            common,
            corpus,
            checkpoint,
            pred_dir,
            split,
            tau,
        } => {
            let mut cfg = base_config(&common, None)?;
            set_corpus(&mut cfg, &corpus);
            if checkpoint.is_some() || pred_dir.is_some() {
                cfg.eval.checkpoint = checkpoint.map(|p| absolute(&p));
                cfg.eval.pred_dir = pred_dir.map(|p| absolute(&p));
            }
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if let Some(t) = tau {
                cfg.finetune.tau = t;
            }
            cmd_eval(&cfg, &common.out, existing(&common))?;
        }
        Command::MaskStats { common, corpus, run } => {
            let mut cfg = base_config(&common, None)?;
            if let Some(r) = run {
                cfg.mask_stats.run = Some(absolute(&r));
            }
            // Without an explicit corpus, use the one the run trained on.
            if corpus.corpus.is_none() && common.config.is_none() {
                if let Some(run) = &cfg.mask_stats.run {
                    let snap = run.join(SNAPSHOT);
                    if snap.exists() {
                        cfg.pretrain.corpus = FileConfig::load(&snap)?.pretrain.corpus;
                    }
                }
            }
            set_corpus(&mut cfg, &corpus);
            cmd_mask_stats(&cfg, &common.out, existing(&common))?;
        }
        Command::Ablate {
            common,
            corpus,
            epochs,
            probe_epochs,
            resume,
        } => {
            let mut cfg = base_config(&common, None)?;
            set_corpus(&mut cfg, &corpus);
            if let Some(t) = epochs {
                cfg.pretrain.schedule.total_epochs = t;
            }
            if let Some(e) = probe_epochs {
                cfg.ablate.probe_epochs = e;
            }
            let ex = if resume { Existing::Keep } else { existing(&common) };
            cmd_ablate(&cfg, &common.out, ex)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs, and returns the exit code.
/// Help and version requests exit 0; malformed command lines exit 1.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
