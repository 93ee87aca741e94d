//! The structured-text run configuration and its resolved snapshot.

use crate::CliError;
use anatomask::distill::{Direction, FinetuneConfig, RunConfig};
use anatomask::maskgen::Significance;
use anatomask::nnet::{DecoderVariant, NetConfig, Optimizer};
use anatomask::volume::PhantomSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// File name of the resolved configuration written into every output
/// directory.
pub const SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub phantoms: PhantomsSection,
    /// Pretraining run; `pretrain.corpus` is the corpus every other
    /// subcommand reads as well.
    pub pretrain: RunConfig,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
    pub mask_stats: MaskStatsSection,
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomsSection {
    pub count: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub spec: PhantomSpec,
}

impl Default for PhantomsSection {
    fn default() -> Self {
        Self {
            count: 32,
            dims: [48; 3],
            spacing: [1.5; 3],
            spec: PhantomSpec::default(),
        }
    }
}

/// Probe settings; the trunk architecture is `pretrain.net`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    /// A pretraining run directory (its student weights) or a parameter
    /// file. Absent means random initialisation.
    pub pretrained: Option<PathBuf>,
    /// Also train from random initialisation and write a comparison.
    pub compare_random: bool,
    pub epochs: u64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    /// Defaults to the class count of the corpus labels.
    pub classes: Option<u16>,
    pub holdout: f64,
    pub tau: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::new(NetConfig::default(), 2);
        Self {
            pretrained: None,
            compare_random: false,
            epochs: d.epochs,
            optimizer: d.optimizer,
            batch_size: d.batch_size,
            classes: None,
            holdout: d.holdout,
            tau: d.tau,
            augment: d.augment,
            seed: d.seed,
        }
    }
}

impl FinetuneSection {
    pub fn to_config(&self, net: &NetConfig, classes: u16) -> FinetuneConfig {
        FinetuneConfig {
            net: net.clone(),
            epochs: self.epochs,
            optimizer: self.optimizer.clone(),
            batch_size: self.batch_size,
            classes,
            holdout: self.holdout,
            tau: self.tau,
            augment: self.augment,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    HeldOut,
    All,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Parameter file with a segmentation head.
    pub checkpoint: Option<PathBuf>,
    /// Directory of label files named like the corpus label files.
    pub pred_dir: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskStatsSection {
    /// Pretraining run directory holding the mask log.
    pub run: Option<PathBuf>,
}

/// Cell matrix of an ablation: the cartesian product of every list, in
/// field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub decoders: Vec<DecoderVariant>,
    pub self_distillation: Vec<bool>,
    pub significance: Vec<Significance>,
    pub direction: Vec<Direction>,
    pub gammas: Vec<f64>,
    /// Probe epochs per cell; the rest of the probe follows `finetune`.
    pub probe_epochs: u64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            decoders: vec![DecoderVariant::Hierarchical, DecoderVariant::Simple],
            self_distillation: vec![true, false],
            significance: vec![Significance::High],
            direction: vec![Direction::EasyToHard],
            gammas: vec![0.6, 0.8, 0.9],
            probe_epochs: 2,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialise configuration: {e}")))
    }

    /// Applies a seed to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantoms.spec.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Writes `config.toml` into `dir`, headed by the producing subcommand.
    pub fn write_snapshot(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let path = dir.join(SNAPSHOT);
        let text = format!("# resolved configuration of `anatomask {command}`\n{}", self.to_toml()?);
        std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(FileConfig::parse("").unwrap(), FileConfig::default());
    }

    #[test]
    fn partial_sections_keep_field_defaults() {
        let c = FileConfig::parse("[pretrain]\ngamma = 0.8\n[pretrain.schedule]\ntotal_epochs = 3\n").unwrap();
        assert_eq!(c.pretrain.gamma, 0.8);
        assert_eq!(c.pretrain.schedule.total_epochs, 3);
        assert_eq!(c.pretrain.schedule.r_end, 0.5);
        assert_eq!(c.pretrain.net, NetConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FileConfig::parse("[pretrain]\ngama = 0.8\n").is_err());
        assert!(FileConfig::parse("[nope]\n").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = FileConfig::default();
        c.set_seed(7);
        c.pretrain.corpus = "/tmp/corpus".into();
        c.finetune.pretrained = Some("/tmp/run".into());
        c.ablate.gammas = vec![0.75];
        c.pretrain.optimizer = Optimizer::Sgd { lr: 0.5 };
        let back = FileConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
