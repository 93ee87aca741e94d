//! Intensity normalisation, resampling and the crop/flip augmentation.

use super::{linear_index, LabelVolume, Result, Volume, VolumeError};
use crate::rng::Rng;
use rand::Rng as _;

pub const ZNORM_EPS: f64 = 1e-8;

/// Rescales intensities to zero mean and unit variance over all voxels.
pub fn znorm(v: &Volume) -> Volume {
    let n = v.len() as f64;
    let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data()
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(ZNORM_EPS);
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 - mean) / sd) as f32)
        .collect();
    Volume::new(v.dims(), v.spacing(), data).expect("z-normalisation preserves invariants")
}

/// Trilinear resampling to `target` spacing, clamping sample positions to the
/// input extent.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(VolumeError::InvalidSpacing(target));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let mut out_dims = [0usize; 3];
    let mut scale = [0f64; 3];
    for a in 0..3 {
        out_dims[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
        scale[a] = target[a] / spacing[a];
    }
    // Per-axis (lower index, upper index, upper weight) tables.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..out_dims[a])
                .map(|i| {
                    let pos = (i as f64 * scale[a]).clamp(0.0, (dims[a] - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(dims[a] - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        })
        .collect();
    let src = v.data();
    let at = |x, y, z| src[linear_index(dims, x, y, z)] as f64;
    Volume::from_fn(out_dims, target, |x, y, z| {
        let (x0, x1, tx) = taps[0][x];
        let (y0, y1, ty) = taps[1][y];
        let (z0, z1, tz) = taps[2][z];
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz) as f32
    })
}

/// One sampled crop window plus per-axis flip decisions. Applying the same
/// `Augment` to an image and its labels keeps them aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Augment {
    pub offset: [usize; 3],
    pub size: [usize; 3],
    pub flip: [bool; 3],
}

impl Augment {
    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            offset: [0; 3],
            size: dims,
            flip: [false; 3],
        }
    }

    fn check(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.offset[a] + self.size[a] > dims[a]) || self.size.contains(&0) {
            return Err(VolumeError::PatchTooLarge {
                patch: self.size,
                dims,
            });
        }
        Ok(())
    }

    #[inline]
    fn source(&self, x: usize, y: usize, z: usize) -> (usize, usize, usize) {
        let pick = |a: usize, i: usize| {
            let i = if self.flip[a] { self.size[a] - 1 - i } else { i };
            self.offset[a] + i
        };
        (pick(0, x), pick(1, y), pick(2, z))
    }

    pub fn apply(&self, v: &Volume) -> Result<Volume> {
        self.check(v.dims())?;
        Volume::from_fn(self.size, v.spacing(), |x, y, z| {
            let (sx, sy, sz) = self.source(x, y, z);
            v.get(sx, sy, sz)
        })
    }

    pub fn apply_labels(&self, l: &LabelVolume) -> Result<LabelVolume> {
        self.check(l.dims())?;
        LabelVolume::from_fn(self.size, l.classes(), |x, y, z| {
            let (sx, sy, sz) = self.source(x, y, z);
            l.get(sx, sy, sz)
        })
    }
}

fn sample_offset(dims: [usize; 3], patch: [usize; 3], rng: &mut Rng) -> Result<[usize; 3]> {
    if (0..3).any(|a| patch[a] > dims[a] || patch[a] == 0) {
        return Err(VolumeError::PatchTooLarge { patch, dims });
    }
    let mut offset = [0; 3];
    for a in 0..3 {
        offset[a] = rng.gen_range(0..=dims[a] - patch[a]);
    }
    Ok(offset)
}

fn sample_flips(rng: &mut Rng) -> [bool; 3] {
    [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)]
}

/// Draws a crop window then flip decisions, in that order.
pub fn sample_augment(dims: [usize; 3], patch: [usize; 3], rng: &mut Rng) -> Result<Augment> {
    let offset = sample_offset(dims, patch, rng)?;
    let flip = sample_flips(rng);
    Ok(Augment {
        offset,
        size: patch,
        flip,
    })
}

pub fn crop_random(v: &Volume, patch: [usize; 3], rng: &mut Rng) -> Result<Volume> {
    let offset = sample_offset(v.dims(), patch, rng)?;
    Augment {
        offset,
        size: patch,
        flip: [false; 3],
    }
    .apply(v)
}

pub fn flip_random(v: &Volume, rng: &mut Rng) -> Volume {
    let aug = Augment {
        offset: [0; 3],
        size: v.dims(),
        flip: sample_flips(rng),
    };
    aug.apply(v).expect("full-size window always fits")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn noise(dims: [usize; 3], seed: u64) -> Volume {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded(seed);
        Volume::from_fn(dims, [1.0; 3], |_, _, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (3.0 + 2.5 * z) as f32
        })
        .unwrap()
    }

    fn moments(v: &Volume) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.data().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
        (m, var)
    }

    #[test]
    fn znorm_constant_is_zero() {
        let v = Volume::filled([3, 3, 3], [1.0; 3], 5.0).unwrap();
        assert!(znorm(&v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn znorm_two_voxels() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 2.0]).unwrap();
        assert_eq!(znorm(&v).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn znorm_noise_moments() {
        let v = znorm(&noise([8, 8, 8], 11));
        let (m, var) = moments(&v);
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
        assert_eq!(v.dims(), [8, 8, 8]);
    }

    #[test]
    fn znorm_is_idempotent() {
        let once = znorm(&noise([6, 5, 4], 3));
        let twice = znorm(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = noise([5, 4, 3], 1);
        let v = Volume::new(v.dims(), [0.1, 0.3, 1.7], v.into_data()).unwrap();
        let r = resample(&v, [0.1, 0.3, 1.7]).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn resample_halved_ramp_hits_midpoints() {
        let v = Volume::from_fn([4, 1, 1], [1.0; 3], |x, _, _| (3 * x) as f32 + 1.0).unwrap();
        let r = resample(&v, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [8, 1, 1]);
        // Hand-computed: output i samples input position i/2, clamped to 3.
        let expected = [1.0, 2.5, 4.0, 5.5, 7.0, 8.5, 10.0, 10.0];
        assert_eq!(r.data(), &expected);
    }

    #[test]
    fn resample_doubled_spacing_halves_dims() {
        let v = noise([4, 4, 4], 2);
        let r = resample(&v, [2.0; 3]).unwrap();
        assert_eq!(r.dims(), [2, 2, 2]);
        assert_eq!(r.get(1, 1, 1), v.get(2, 2, 2));
        assert!(resample(&v, [0.0, 1.0, 1.0]).is_err());
    }

    fn coords(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, [1.0; 3], |x, y, z| (x + 100 * y + 10_000 * z) as f32).unwrap()
    }

    #[test]
    fn full_size_crop_is_identity() {
        let v = coords([4, 3, 2]);
        let mut rng = seeded(0);
        assert_eq!(crop_random(&v, [4, 3, 2], &mut rng).unwrap(), v);
    }

    #[test]
    fn crop_matches_index_arithmetic() {
        let v = coords([9, 7, 5]);
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let aug = sample_augment(v.dims(), [4, 3, 2], &mut rng).unwrap();
            let mut rng = seeded(seed);
            let c = crop_random(&v, [4, 3, 2], &mut rng).unwrap();
            let [ox, oy, oz] = aug.offset;
            for z in 0..2 {
                for y in 0..3 {
                    for x in 0..4 {
                        let expected = (x + ox) + 100 * (y + oy) + 10_000 * (z + oz);
                        assert_eq!(c.get(x, y, z), expected as f32);
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let v = coords([4, 4, 4]);
        let mut rng = seeded(0);
        assert!(matches!(
            crop_random(&v, [5, 4, 4], &mut rng),
            Err(VolumeError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn flip_is_an_involution() {
        let v = coords([3, 4, 5]);
        for seed in 0..8 {
            let once = flip_random(&v, &mut seeded(seed));
            let twice = flip_random(&once, &mut seeded(seed));
            assert_eq!(twice, v);
        }
    }

    #[test]
    fn augment_is_deterministic_and_varied() {
        let a = sample_augment([10, 10, 10], [4, 4, 4], &mut seeded(5)).unwrap();
        let b = sample_augment([10, 10, 10], [4, 4, 4], &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        let flips: std::collections::HashSet<_> = (0..64)
            .map(|s| sample_augment([10, 10, 10], [4, 4, 4], &mut seeded(s)).unwrap().flip)
            .collect();
        assert_eq!(flips.len(), 8);
    }
}
