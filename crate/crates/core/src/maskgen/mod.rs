//! Mask units, exact-cardinality masks and reconstruction-guided masking.
//!
//! A volume is tiled by a [`PatchGrid`] of equally sized units. A [`Mask`]
//! hides exactly `ceil(gamma * n)` of the `n` units. [`anatomask`] re-spends
//! that budget: a scheduled share goes to the units the teacher reconstructed
//! worst, and the rest is drawn uniformly.

mod anatomask;
mod grid;
mod overlap;
mod schedule;

pub use anatomask::{anatomask, random_mask, unit_losses, unit_losses_from_slice, Significance};
pub use grid::{budget, ceil_count, LossMap, Mask, PatchGrid};
pub use overlap::{mask_overlap_report, write_overlap_csv, ClassOverlap, OverlapReport, OverlapRow};
pub use schedule::MaskSchedule;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("significance ratio {0} outside [0, 1]")]
    InvalidSignificance(f64),
    #[error("unit {unit:?} does not tile volume {dims:?}")]
    IndivisibleDims { dims: [usize; 3], unit: [usize; 3] },
    #[error("unit index {0} out of range for grid of {1} units")]
    IndexOutOfRange(usize, usize),
    #[error("mask has {found} units, budget is {expected}")]
    Cardinality { expected: usize, found: usize },
    #[error("duplicate unit index {0}")]
    Duplicate(usize),
    #[error("volume dims {volume:?} incompatible with grid dims {grid:?}")]
    DimsMismatch { volume: [usize; 3], grid: [usize; 3] },
    #[error("loss map domain does not match the initial mask")]
    DomainMismatch,
    #[error("loss for unit {0} is negative or non-finite")]
    BadLoss(usize),
    #[error("ratio {given} differs from the initial mask ratio {initial}")]
    RatioMismatch { given: f64, initial: f64 },
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("epoch {t} beyond schedule length {total}")]
    EpochOutOfRange { t: u64, total: u64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;
