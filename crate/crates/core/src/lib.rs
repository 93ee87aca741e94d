//! Masked-image-modeling pretraining for 3D volumes with reconstruction-guided
//! self-masking.
//!
//! The crate is organised bottom-up:
//!
//! - [`volume`]: dense volumes, the on-disk format, preprocessing and synthetic phantoms.
//! - [`maskgen`]: patch grids, exact-ratio masks, the masking schedule and loss-guided masks.
//! - [`nnet`]: a small reverse-mode differentiable 3D network stack with sparse convolution.
//! - [`distill`]: the teacher/student pretraining loop and the segmentation probe.
//! - [`metrics`]: Dice and normalized surface Dice.

pub mod distill;
pub mod maskgen;
pub mod metrics;
pub mod nnet;
pub mod rng;
pub mod volume;

pub use maskgen::{LossMap, Mask, MaskSchedule, PatchGrid};
pub use nnet::{NetConfig, ParamStore, Tensor};
pub use volume::{LabelVolume, Volume};
