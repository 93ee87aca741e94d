use super::{DistillError, Result};
use crate::maskgen::{MaskSchedule, PatchGrid, Significance};
use crate::nnet::{NetConfig, Optimizer};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Order in which loss-selected units enter the mask over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// The loss-selected share grows from the smaller to the larger endpoint.
    #[default]
    EasyToHard,
    HardToEasy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmaCadence {
    #[default]
    Step,
    Epoch,
}

/// Learning-rate trajectory over the epochs of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - t / T)` during epoch `t` (0-based).
    #[default]
    Linear,
}

/// The three ablation axes of the masking strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub self_distillation: bool,
    pub significance: Significance,
    pub direction: Direction,
}

impl Default for Strategy {
    fn default() -> Self {
        Self {
            self_distillation: true,
            significance: Significance::High,
            direction: Direction::EasyToHard,
        }
    }
}

impl Strategy {
    /// Short stable label, e.g. `sd-high-e2h`.
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}",
            if self.self_distillation { "sd" } else { "nosd" },
            match self.significance {
                Significance::High => "high",
                Significance::Low => "low",
            },
            match self.direction {
                Direction::EasyToHard => "e2h",
                Direction::HardToEasy => "h2e",
            }
        )
    }
}

fn default_gamma() -> f64 {
    0.6
}
fn default_decay() -> f64 {
    0.999
}
fn default_unit() -> [usize; 3] {
    [8; 3]
}
fn default_patch() -> [usize; 3] {
    [48; 3]
}
fn default_batch() -> usize {
    1
}
fn default_true() -> bool {
    true
}

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub schedule: MaskSchedule,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub ema_cadence: EmaCadence,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "default_unit")]
    pub mask_unit: [usize; 3],
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patch")]
    pub patch: [usize; 3],
    /// Random crop and flip on every sample.
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub corpus: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            schedule: MaskSchedule::default(),
            gamma: default_gamma(),
            ema_decay: default_decay(),
            ema_cadence: EmaCadence::default(),
            optimizer: Optimizer::default(),
            lr_schedule: LrSchedule::default(),
            mask_unit: default_unit(),
            batch_size: default_batch(),
            patch: default_patch(),
            augment: true,
            corpus: PathBuf::new(),
            seed: 0,
            strategy: Strategy::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::Config(m));
        self.net.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.net.check_input(self.patch)?;
        self.grid()?;
        Ok(())
    }

    /// Optimizer settings in effect during epoch `epoch` (0-based).
    pub fn optimizer_at(&self, epoch: u64) -> Optimizer {
        match self.lr_schedule {
            LrSchedule::Constant => self.optimizer.clone(),
            LrSchedule::Linear => {
                let t = self.schedule.total_epochs.max(1) as f64;
                let f = 1.0 - (epoch as f64 / t).min(1.0);
                self.optimizer.with_lr(self.optimizer.lr() * f)
            }
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        Ok(PatchGrid::for_volume(self.patch, self.mask_unit)?)
    }

    /// The schedule actually followed: endpoints ordered per the direction
    /// flag, so easy-to-hard always grows the loss-selected share.
    pub fn effective_schedule(&self) -> MaskSchedule {
        let s = self.schedule;
        let (lo, hi) = (s.r0.min(s.r_end), s.r0.max(s.r_end));
        let (r0, r_end) = match self.strategy.direction {
            Direction::EasyToHard => (lo, hi),
            Direction::HardToEasy => (hi, lo),
        };
        MaskSchedule { r0, r_end, ..s }
    }
}

fn default_epochs() -> u64 {
    10
}
fn default_holdout() -> f64 {
    0.25
}
fn default_tau() -> f64 {
    1.0
}
fn default_finetune_opt() -> Optimizer {
    Optimizer::AdamW {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 1e-4,
    }
}

/// Segmentation probe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_finetune_opt")]
    pub optimizer: Optimizer,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Expected class count of the labels, background included.
    pub classes: u16,
    /// Trailing fraction of the corpus held out for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
    /// Surface tolerance in voxels.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(net: NetConfig, classes: u16) -> Self {
        Self {
            net,
            epochs: default_epochs(),
            optimizer: default_finetune_opt(),
            batch_size: default_batch(),
            classes,
            holdout: default_holdout(),
            tau: default_tau(),
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.optimizer.validate()?;
        if self.classes < 2 {
            return Err(DistillError::Config("need at least two classes".into()));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(DistillError::Config(format!(
                "holdout must lie in (0, 1), got {}",
                self.holdout
            )));
        }
        if self.batch_size == 0 {
            return Err(DistillError::Config("batch_size must be >= 1".into()));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(DistillError::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        Ok(())
    }
}
