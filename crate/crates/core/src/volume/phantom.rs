//! Procedural anatomical phantoms: ellipsoid "organs", tube "vessels" and
//! ellipsoidal-shell "bones" over a constant background.

use super::{LabelVolume, Result, Volume, VolumeError};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub const CLASS_ORGAN: u16 = 1;
pub const CLASS_VESSEL: u16 = 2;
pub const CLASS_BONE: u16 = 3;
pub const PHANTOM_CLASSES: u16 = 4;

/// Sampling ranges for one structure family. `size` is a semi-axis length for
/// organs and bones and a tube radius for vessels, in voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub count: [usize; 2],
    pub size: [f64; 2],
    pub intensity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub organs: FamilySpec,
    pub vessels: FamilySpec,
    pub bones: FamilySpec,
    /// Shell thickness range for bones, in voxels.
    pub shell_thickness: [f64; 2],
    pub background: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            organs: FamilySpec {
                count: [3, 6],
                size: [10.0, 20.0],
                intensity: [20.0, 160.0],
            },
            vessels: FamilySpec {
                count: [1, 2],
                size: [2.0, 4.0],
                intensity: [180.0, 260.0],
            },
            bones: FamilySpec {
                count: [1, 2],
                size: [10.0, 16.0],
                intensity: [300.0, 400.0],
            },
            shell_thickness: [3.0, 5.0],
            background: -100.0,
            noise_std: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn empty(background: f64) -> Self {
        let none = |lo: f64, hi: f64| FamilySpec {
            count: [0, 0],
            size: [1.0, 2.0],
            intensity: [lo, hi],
        };
        Self {
            organs: none(0.0, 1.0),
            vessels: none(1.0, 2.0),
            bones: none(2.0, 3.0),
            shell_thickness: [1.0, 2.0],
            background,
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VolumeError::Spec(m));
        for (name, f) in self.families() {
            if !(f.intensity[0] < f.intensity[1]) {
                return bad(format!("{name}: intensity range must satisfy min < max"));
            }
            if !(f.size[0] > 0.0 && f.size[0] <= f.size[1]) {
                return bad(format!("{name}: size range must be positive and ordered"));
            }
            if f.count[0] > f.count[1] {
                return bad(format!("{name}: count range must be ordered"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if !(self.shell_thickness[0] > 0.0 && self.shell_thickness[0] <= self.shell_thickness[1]) {
            return bad("shell_thickness must be positive and ordered".into());
        }
        Ok(())
    }

    fn families(&self) -> [(&'static str, &FamilySpec); 3] {
        [
            ("organs", &self.organs),
            ("vessels", &self.vessels),
            ("bones", &self.bones),
        ]
    }

    pub fn intensity_range(&self, class: u16) -> Option<[f64; 2]> {
        match class {
            CLASS_ORGAN => Some(self.organs.intensity),
            CLASS_VESSEL => Some(self.vessels.intensity),
            CLASS_BONE => Some(self.bones.intensity),
            _ => None,
        }
    }
}

type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Structure {
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
        rotation: Mat3,
        intensity: f64,
    },
    Tube {
        start: [f64; 3],
        end: [f64; 3],
        radius: f64,
        intensity: f64,
    },
    Shell {
        center: [f64; 3],
        semi_axes: [f64; 3],
        rotation: Mat3,
        thickness: f64,
        intensity: f64,
    },
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Squared normalised radius of `p` in the ellipsoid frame.
fn ellipsoid_rho2(p: [f64; 3], center: [f64; 3], axes: [f64; 3], rot: &Mat3) -> f64 {
    let d = sub(p, center);
    (0..3)
        .map(|i| {
            let u = dot(rot[i], d) / axes[i];
            u * u
        })
        .sum()
}

impl Structure {
    pub fn class(&self) -> u16 {
        match self {
            Structure::Ellipsoid { .. } => CLASS_ORGAN,
            Structure::Tube { .. } => CLASS_VESSEL,
            Structure::Shell { .. } => CLASS_BONE,
        }
    }

    pub fn intensity(&self) -> f64 {
        match *self {
            Structure::Ellipsoid { intensity, .. }
            | Structure::Tube { intensity, .. }
            | Structure::Shell { intensity, .. } => intensity,
        }
    }

    /// Whether the voxel centre `p` lies inside the structure.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Structure::Ellipsoid {
                center,
                semi_axes,
                rotation,
                ..
            } => ellipsoid_rho2(p, *center, *semi_axes, rotation) <= 1.0,
            Structure::Tube {
                start, end, radius, ..
            } => {
                let ab = sub(*end, *start);
                let ap = sub(p, *start);
                let len2 = dot(ab, ab);
                let t = if len2 > 0.0 {
                    (dot(ap, ab) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = [
                    ap[0] - t * ab[0],
                    ap[1] - t * ab[1],
                    ap[2] - t * ab[2],
                ];
                dot(q, q) <= radius * radius
            }
            Structure::Shell {
                center,
                semi_axes,
                rotation,
                thickness,
                ..
            } => {
                if ellipsoid_rho2(p, *center, *semi_axes, rotation) > 1.0 {
                    return false;
                }
                let inner = semi_axes.map(|a| a - thickness);
                if inner.iter().any(|&a| a <= 0.0) {
                    return true;
                }
                ellipsoid_rho2(p, *center, inner, rotation) > 1.0
            }
        }
    }

    /// Inclusive voxel bounding box, clipped to `dims`.
    fn bounds(&self, dims: [usize; 3]) -> Option<([usize; 3], [usize; 3])> {
        let (lo, hi) = match self {
            Structure::Ellipsoid {
                center, semi_axes, ..
            }
            | Structure::Shell {
                center, semi_axes, ..
            } => {
                let r = semi_axes.iter().cloned().fold(0.0, f64::max);
                (center.map(|c| c - r), center.map(|c| c + r))
            }
            Structure::Tube {
                start, end, radius, ..
            } => {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for a in 0..3 {
                    lo[a] = start[a].min(end[a]) - radius;
                    hi[a] = start[a].max(end[a]) + radius;
                }
                (lo, hi)
            }
        };
        let mut b0 = [0; 3];
        let mut b1 = [0; 3];
        for a in 0..3 {
            if hi[a] < 0.0 || lo[a] > (dims[a] - 1) as f64 {
                return None;
            }
            b0[a] = lo[a].floor().max(0.0) as usize;
            b1[a] = (hi[a].ceil() as usize).min(dims[a] - 1);
        }
        Some((b0, b1))
    }
}

/// Summary of one generated phantom, recorded in corpus manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureStats {
    pub organs: usize,
    pub vessels: usize,
    pub bones: usize,
    /// Fraction of voxels per class, indexed by class id.
    pub class_fractions: Vec<f64>,
    pub foreground_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelVolume,
    /// The image before noise was added.
    pub clean: Volume,
    pub structures: Vec<Structure>,
    pub stats: StructureStats,
}

/// Paints `structures` in order over a constant background; later structures
/// overwrite earlier ones.
pub fn rasterize(
    structures: &[Structure],
    dims: [usize; 3],
    spacing: [f64; 3],
    background: f64,
) -> Result<(Volume, LabelVolume)> {
    let mut image = Volume::filled(dims, spacing, background as f32)?.into_data();
    let mut labels = vec![0u16; image.len()];
    for s in structures {
        let Some((lo, hi)) = s.bounds(dims) else {
            continue;
        };
        let value = s.intensity() as f32;
        let class = s.class();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if s.contains([x as f64, y as f64, z as f64]) {
                        let i = super::linear_index(dims, x, y, z);
                        image[i] = value;
                        labels[i] = class;
                    }
                }
            }
        }
    }
    Ok((
        Volume::new(dims, spacing, image)?,
        LabelVolume::new(dims, PHANTOM_CLASSES, labels)?,
    ))
}

fn random_rotation(rng: &mut Rng) -> Mat3 {
    let mut q: [f64; 4] = [0.0; 4];
    loop {
        for c in q.iter_mut() {
            *c = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.iter_mut().for_each(|c| *c /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn uniform(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[0] < range[1] {
        rng.gen_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn random_center(rng: &mut Rng, dims: [usize; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for a in 0..3 {
        let n = dims[a] as f64;
        c[a] = uniform(rng, [0.2 * (n - 1.0), 0.8 * (n - 1.0)]);
    }
    c
}

fn sample_structures(spec: &PhantomSpec, dims: [usize; 3], rng: &mut Rng) -> Vec<Structure> {
    let mut out = Vec::new();
    let count = |rng: &mut Rng, f: &FamilySpec| rng.gen_range(f.count[0]..=f.count[1]);

    let organs = count(rng, &spec.organs);
    for _ in 0..organs {
        let semi_axes = [0; 3].map(|_| uniform(rng, spec.organs.size));
        out.push(Structure::Ellipsoid {
            center: random_center(rng, dims),
            semi_axes,
            rotation: random_rotation(rng),
            intensity: uniform(rng, spec.organs.intensity),
        });
    }

    let vessels = count(rng, &spec.vessels);
    let min_dim = dims.iter().cloned().min().unwrap_or(1) as f64;
    for _ in 0..vessels {
        let start = random_center(rng, dims);
        let mut dir = [0.0f64; 3];
        loop {
            for d in dir.iter_mut() {
                *d = StandardNormal.sample(rng);
            }
            let n = dot(dir, dir).sqrt();
            if n > 1e-6 {
                dir.iter_mut().for_each(|d| *d /= n);
                break;
            }
        }
        let len = uniform(rng, [0.3 * min_dim, 0.8 * min_dim]).max(1.0);
        out.push(Structure::Tube {
            start,
            end: [0, 1, 2].map(|a| start[a] + len * dir[a]),
            radius: uniform(rng, spec.vessels.size),
            intensity: uniform(rng, spec.vessels.intensity),
        });
    }

    let bones = count(rng, &spec.bones);
    for _ in 0..bones {
        let semi_axes = [0; 3].map(|_| uniform(rng, spec.bones.size));
        out.push(Structure::Shell {
            center: random_center(rng, dims),
            semi_axes,
            rotation: random_rotation(rng),
            thickness: uniform(rng, spec.shell_thickness),
            intensity: uniform(rng, spec.bones.intensity),
        });
    }
    out
}

/// Samples and rasterizes a phantom. The result depends only on
/// `(spec, dims, spacing)` and the state of `rng`.
pub fn gen_phantom(
    spec: &PhantomSpec,
    dims: [usize; 3],
    spacing: [f64; 3],
    rng: &mut Rng,
) -> Result<Phantom> {
    spec.validate()?;
    let structures = sample_structures(spec, dims, rng);
    let (clean, labels) = rasterize(&structures, dims, spacing, spec.background)?;
    let image = if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated noise_std");
        let data = clean
            .data()
            .iter()
            .map(|&v| (v as f64 + normal.sample(rng)) as f32)
            .collect();
        Volume::new(dims, spacing, data)?
    } else {
        clean.clone()
    };
    let n = labels.data().len() as f64;
    let class_fractions = (0..PHANTOM_CLASSES)
        .map(|k| labels.class_voxels(k) as f64 / n)
        .collect();
    let stats = StructureStats {
        organs: structures.iter().filter(|s| s.class() == CLASS_ORGAN).count(),
        vessels: structures.iter().filter(|s| s.class() == CLASS_VESSEL).count(),
        bones: structures.iter().filter(|s| s.class() == CLASS_BONE).count(),
        class_fractions,
        foreground_fraction: labels.foreground_fraction(),
    };
    Ok(Phantom {
        image,
        labels,
        clean,
        structures,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn empty_scene_is_constant_background() {
        let spec = PhantomSpec::empty(-7.5);
        let p = gen_phantom(&spec, [6, 5, 4], [1.0; 3], &mut seeded(1)).unwrap();
        assert!(p.image.data().iter().all(|&v| v == -7.5));
        assert!(p.labels.data().iter().all(|&l| l == 0));
        assert_eq!(p.stats.foreground_fraction, 0.0);
    }

    #[test]
    fn centered_sphere_matches_point_test() {
        let dims = [11, 11, 11];
        let r = 3.7;
        let s = Structure::Ellipsoid {
            center: [5.0; 3],
            semi_axes: [r; 3],
            rotation: IDENTITY,
            intensity: 1.0,
        };
        let (_, labels) = rasterize(&[s], dims, [1.0; 3], 0.0).unwrap();
        for z in 0..11 {
            for y in 0..11 {
                for x in 0..11 {
                    let rho2 = [x, y, z]
                        .iter()
                        .map(|&c| ((c as f64 - 5.0) / r).powi(2))
                        .sum::<f64>();
                    assert_eq!(labels.get(x, y, z) == CLASS_ORGAN, rho2 <= 1.0);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec::default();
        let a = gen_phantom(&spec, [24, 24, 24], [1.5; 3], &mut seeded(9)).unwrap();
        let b = gen_phantom(&spec, [24, 24, 24], [1.5; 3], &mut seeded(9)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
        let c = gen_phantom(&spec, [24, 24, 24], [1.5; 3], &mut seeded(10)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn labels_agree_with_clean_intensities() {
        let spec = PhantomSpec::default();
        for seed in 0..6 {
            let p = gen_phantom(&spec, [32, 32, 32], [1.5; 3], &mut seeded(seed)).unwrap();
            assert!(p.stats.foreground_fraction > 0.0);
            for (&l, &v) in p.labels.data().iter().zip(p.clean.data()) {
                match spec.intensity_range(l) {
                    Some([lo, hi]) => assert!(v as f64 >= lo - 1e-4 && v as f64 <= hi + 1e-4),
                    None => assert_eq!(v as f64, spec.background),
                }
            }
        }
    }

    #[test]
    fn shells_are_hollow() {
        let s = Structure::Shell {
            center: [10.0; 3],
            semi_axes: [8.0; 3],
            rotation: IDENTITY,
            thickness: 2.0,
            intensity: 1.0,
        };
        assert!(!s.contains([10.0; 3]));
        assert!(s.contains([17.0, 10.0, 10.0]));
        assert!(!s.contains([19.0, 10.0, 10.0]));
    }

    #[test]
    fn degenerate_spec_rejected() {
        let mut spec = PhantomSpec::default();
        spec.vessels.intensity = [5.0, 5.0];
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.noise_std = -1.0;
        assert!(spec.validate().is_err());
    }
}
