//! Dense scalar volumes, label volumes and everything that produces or
//! transforms them before training.

mod io;
mod phantom;
mod preprocess;

pub use io::{load_labels, load_volume, save_labels, save_volume};
pub use phantom::{
    gen_phantom, rasterize, FamilySpec, Phantom, PhantomSpec, Structure, StructureStats, CLASS_BONE,
    CLASS_ORGAN, CLASS_VESSEL, PHANTOM_CLASSES,
};
pub use preprocess::{
    crop_random, flip_random, resample, sample_augment, znorm, Augment, ZNORM_EPS,
};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dimensions must be positive, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("spacing must be finite and strictly positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("data length {found} does not match dims product {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },
    #[error("label {label} at voxel {index} is not below class count {classes}")]
    LabelOutOfRange { index: usize, label: u16, classes: u16 },
    #[error("patch {patch:?} does not fit in volume {dims:?}")]
    PatchTooLarge { patch: [usize; 3], dims: [usize; 3] },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {msg}")]
    Header { path: PathBuf, msg: String },
    #[error("{path}: unsupported byte order {token:?}")]
    ByteOrder { path: PathBuf, token: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {found} bytes after the payload, expected {expected}")]
    TrailingData {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at voxel {index}")]
    NonFiniteInFile { path: PathBuf, index: usize },
    #[error("invalid phantom spec: {0}")]
    Spec(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    Ok(dims[0] * dims[1] * dims[2])
}

/// Linear index of voxel `(x, y, z)` in x-fastest order.
#[inline]
pub fn linear_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// A dense 3D scalar field. `dims` is `(H, W, D)`, stored x-fastest so voxel
/// `(x, y, z)` lives at `x + H * (y + W * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidSpacing(spacing));
        }
        if data.len() != n {
            return Err(VolumeError::LengthMismatch {
                expected: n,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, spacing, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }
}

/// Integer class labels over a voxel grid, `0` being background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    classes: u16,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], classes: u16, data: Vec<u16>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(VolumeError::LengthMismatch {
                expected: n,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|&l| l >= classes) {
            return Err(VolumeError::LabelOutOfRange {
                index,
                label: data[index],
                classes,
            });
        }
        Ok(Self {
            dims,
            classes,
            data,
        })
    }

    pub fn background(dims: [usize; 3], classes: u16) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, classes.max(1), vec![0; n])
    }

    pub fn from_fn(
        dims: [usize; 3],
        classes: u16,
        mut f: impl FnMut(usize, usize, usize) -> u16,
    ) -> Result<Self> {
        check_dims(dims)?;
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, classes, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn classes(&self) -> u16 {
        self.classes
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    /// Fraction of voxels carrying a non-background label.
    pub fn foreground_fraction(&self) -> f64 {
        let fg = self.data.iter().filter(|&&l| l != 0).count();
        fg as f64 / self.data.len() as f64
    }

    pub fn class_voxels(&self, class: u16) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }
}
