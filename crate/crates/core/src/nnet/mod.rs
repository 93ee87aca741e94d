//! A small differentiable 3D network stack.
//!
//! Feature maps are [`Tensor`]s of shape `[D, W, H, C]` (channels innermost,
//! then x), so a spatial site index matches the voxel index of a
//! [`Volume`](crate::volume::Volume). Convolution weights are `[k, k, k, Cin, Cout]`
//! with taps ordered z, y, x.
//!
//! Forward passes are recorded on a [`Graph`]; [`Graph::backward`] returns
//! exact reverse-mode gradients for every parameter of a [`ParamStore`].

mod archive;
mod conv;
mod graph;
mod network;
mod optim;
mod params;
mod sparse;
mod tensor;

pub use archive::{read_archive, write_archive, Archive};
pub use conv::{conv3d_backward, conv3d_forward, conv_output_dims, Activity, ConvGrads};
pub use graph::{Graph, NodeId};
pub use network::{
    add_seg_head, decode, encode, init_params, masked_input, reconstruct, recon_loss, segment,
    DecoderVariant, NetConfig, SEG_BIAS, SEG_WEIGHT,
};
pub use optim::{opt_step, OptState, Optimizer};
pub use params::ParamStore;
pub use sparse::{ActiveSiteMap, Occupancy};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
    #[error("input dims {dims:?} not divisible by {factor}")]
    Indivisible { dims: [usize; 3], factor: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter schemas differ: {0} vs {1}")]
    SchemaMismatch(String, String),
    #[error("gradient cannot flow through operation {0:?}")]
    UnsupportedOp(String),
    #[error("graph was recorded with gradients disabled")]
    GradDisabled,
    #[error("loss node must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("loss undefined on an empty mask")]
    EmptyMask,
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Archive { path: std::path::PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Scalar type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
