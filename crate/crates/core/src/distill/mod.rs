//! Teacher/student self-distillation pretraining and the segmentation probe.

mod config;
mod corpus;
mod ema;
mod finetune;
mod run;
mod train;

pub use config::{Direction, EmaCadence, FinetuneConfig, LrSchedule, RunConfig, Strategy};
pub use corpus::{
    corpus_files, load_corpus, read_manifest, write_corpus, Corpus, CorpusEntry, CorpusManifest,
    Sample, MANIFEST,
};
pub use ema::ema_update;
pub use finetune::{finetune_seg, predict, FinetuneOutcome};
pub use run::{
    load_checkpoint, overlap_rows, prepare_samples, pretrain, read_mask_log, read_metrics,
    replay_overlap, save_checkpoint, MetricsRow, PretrainOptions, PretrainOutcome, CHECKPOINT,
    MASK_LOG, METRICS_CSV, METRICS_HEADER, OVERLAP_CSV, STUDENT_FINAL, TEACHER_FINAL,
    TEACHER_INIT, TIMING_CSV,
};
pub use train::{pretrain_step, run_epoch, DistillState, EpochMetrics, MaskLogEntry, StepMetrics};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("labels have {found} classes, expected {expected}")]
    ClassMismatch { expected: u16, found: u16 },
    #[error("non-finite parameters after step {step}")]
    Diverged { step: u64 },
    #[error(transparent)]
    Mask(#[from] crate::maskgen::MaskError),
    #[error(transparent)]
    Nn(#[from] crate::nnet::NnError),
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;
