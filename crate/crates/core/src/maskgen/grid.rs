use super::{MaskError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Slack applied before rounding up counts, so that e.g. `0.3 * 10` (which is
/// `3.0000000000000004` in binary) counts as 3 units rather than 4.
const COUNT_SLACK: f64 = 1e-9;

/// `ceil(x)` with [`COUNT_SLACK`] tolerance, for non-negative `x`.
pub fn ceil_count(x: f64) -> usize {
    (x - COUNT_SLACK).ceil().max(0.0) as usize
}

/// Mask budget `ceil(gamma * n)`.
pub fn budget(gamma: f64, n: usize) -> usize {
    ceil_count(gamma * n as f64).min(n)
}

/// Tiling of a volume into `gdims` units of `unit` voxels each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub unit: [usize; 3],
    pub gdims: [usize; 3],
}

impl PatchGrid {
    pub fn new(unit: [usize; 3], gdims: [usize; 3]) -> Result<Self> {
        if unit.contains(&0) || gdims.contains(&0) {
            return Err(MaskError::IndivisibleDims {
                dims: [0; 3],
                unit,
            });
        }
        Ok(Self { unit, gdims })
    }

    /// Grid tiling `dims` exactly with units of size `unit`.
    pub fn for_volume(dims: [usize; 3], unit: [usize; 3]) -> Result<Self> {
        if unit.contains(&0) || (0..3).any(|a| dims[a] == 0 || dims[a] % unit[a] != 0) {
            return Err(MaskError::IndivisibleDims { dims, unit });
        }
        Ok(Self {
            unit,
            gdims: [0, 1, 2].map(|a| dims[a] / unit[a]),
        })
    }

    pub fn n(&self) -> usize {
        self.gdims.iter().product()
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.gdims[a] * self.unit[a])
    }

    pub fn unit_voxels(&self) -> usize {
        self.unit.iter().product()
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        if dims != self.volume_dims() {
            return Err(MaskError::DimsMismatch {
                volume: dims,
                grid: self.gdims,
            });
        }
        Ok(())
    }

    pub fn unit_index(&self, gx: usize, gy: usize, gz: usize) -> usize {
        gx + self.gdims[0] * (gy + self.gdims[1] * gz)
    }

    pub fn unit_coords(&self, u: usize) -> [usize; 3] {
        let gx = u % self.gdims[0];
        let gy = (u / self.gdims[0]) % self.gdims[1];
        let gz = u / (self.gdims[0] * self.gdims[1]);
        [gx, gy, gz]
    }

    /// Unit containing voxel `(x, y, z)`.
    #[inline]
    pub fn unit_of(&self, x: usize, y: usize, z: usize) -> usize {
        self.unit_index(x / self.unit[0], y / self.unit[1], z / self.unit[2])
    }

    /// Unit index of every voxel, x-fastest.
    pub fn voxel_units(&self) -> Vec<usize> {
        let [h, w, d] = self.volume_dims();
        let mut out = Vec::with_capacity(h * w * d);
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    out.push(self.unit_of(x, y, z));
                }
            }
        }
        out
    }
}

/// A set of masked units with `|masked| == ceil(ratio * n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MaskRecord", into = "MaskRecord")]
pub struct Mask {
    grid: PatchGrid,
    masked: Vec<usize>,
    ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    grid: PatchGrid,
    ratio: f64,
    masked: Vec<usize>,
}

impl TryFrom<MaskRecord> for Mask {
    type Error = MaskError;
    fn try_from(r: MaskRecord) -> Result<Self> {
        Mask::new(r.grid, r.ratio, r.masked)
    }
}

impl From<Mask> for MaskRecord {
    fn from(m: Mask) -> Self {
        MaskRecord {
            grid: m.grid,
            ratio: m.ratio,
            masked: m.masked,
        }
    }
}

pub(crate) fn check_ratio(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(MaskError::InvalidRatio(gamma));
    }
    Ok(())
}

impl Mask {
    /// Validates and normalises (sorts) a masked-unit list.
    pub fn new(grid: PatchGrid, ratio: f64, mut masked: Vec<usize>) -> Result<Self> {
        check_ratio(ratio)?;
        let n = grid.n();
        masked.sort_unstable();
        for w in masked.windows(2) {
            if w[0] == w[1] {
                return Err(MaskError::Duplicate(w[0]));
            }
        }
        if let Some(&last) = masked.last() {
            if last >= n {
                return Err(MaskError::IndexOutOfRange(last, n));
            }
        }
        let expected = budget(ratio, n);
        if masked.len() != expected {
            return Err(MaskError::Cardinality {
                expected,
                found: masked.len(),
            });
        }
        Ok(Self {
            grid,
            masked,
            ratio,
        })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Masked unit indices in ascending order.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn contains(&self, unit: usize) -> bool {
        self.masked.binary_search(&unit).is_ok()
    }

    /// Per-unit flags, `true` = masked.
    pub fn unit_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.grid.n()];
        for &u in &self.masked {
            flags[u] = true;
        }
        flags
    }

    /// Per-voxel flags, `true` = masked, x-fastest over the grid's volume.
    pub fn voxel_flags(&self) -> Vec<bool> {
        let flags = self.unit_flags();
        self.grid.voxel_units().into_iter().map(|u| flags[u]).collect()
    }

    /// Per-voxel visibility, the complement of [`Mask::voxel_flags`].
    pub fn visibility(&self) -> Vec<bool> {
        self.voxel_flags().into_iter().map(|m| !m).collect()
    }
}

/// Per-unit reconstruction losses over the units of one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMap {
    grid: PatchGrid,
    entries: BTreeMap<usize, f64>,
}

impl LossMap {
    pub fn new(grid: PatchGrid, entries: BTreeMap<usize, f64>) -> Result<Self> {
        for (&u, &l) in &entries {
            if u >= grid.n() {
                return Err(MaskError::IndexOutOfRange(u, grid.n()));
            }
            if !(l.is_finite() && l >= 0.0) {
                return Err(MaskError::BadLoss(u));
            }
        }
        Ok(Self { grid, entries })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn entries(&self) -> &BTreeMap<usize, f64> {
        &self.entries
    }

    pub fn get(&self, unit: usize) -> Option<f64> {
        self.entries.get(&unit).copied()
    }

    /// Whether the domain equals exactly the masked set of `mask`.
    pub fn matches(&self, mask: &Mask) -> bool {
        self.grid == *mask.grid()
            && self.entries.len() == mask.len()
            && self.entries.keys().zip(mask.masked()).all(|(a, b)| a == b)
    }

    pub fn mean(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().sum::<f64>() / self.entries.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_rounds_up_with_slack() {
        assert_eq!(budget(0.3, 10), 3);
        assert_eq!(budget(0.6, 27), 17);
        assert_eq!(budget(1.0, 5), 5);
        assert_eq!(budget(1.0 / 3.0, 27), 9);
        assert_eq!(budget(0.01, 8), 1);
    }

    #[test]
    fn grid_requires_exact_tiling() {
        assert!(PatchGrid::for_volume([16, 16, 8], [4, 4, 4]).is_ok());
        assert!(PatchGrid::for_volume([16, 15, 8], [4, 4, 4]).is_err());
        let g = PatchGrid::for_volume([8, 12, 4], [4, 4, 4]).unwrap();
        assert_eq!(g.gdims, [2, 3, 1]);
        assert_eq!(g.n(), 6);
        assert_eq!(g.unit_of(5, 9, 3), g.unit_index(1, 2, 0));
        for u in 0..g.n() {
            let [x, y, z] = g.unit_coords(u);
            assert_eq!(g.unit_index(x, y, z), u);
        }
    }

    #[test]
    fn mask_validation() {
        let g = PatchGrid::new([1; 3], [2, 2, 2]).unwrap();
        assert!(Mask::new(g, 0.5, vec![3, 1, 0, 7]).is_ok());
        assert_eq!(Mask::new(g, 0.5, vec![3, 1, 0, 7]).unwrap().masked(), &[0, 1, 3, 7]);
        assert!(matches!(Mask::new(g, 0.5, vec![0, 1, 2]), Err(MaskError::Cardinality { .. })));
        assert!(matches!(Mask::new(g, 0.5, vec![0, 1, 1, 2]), Err(MaskError::Duplicate(1))));
        assert!(matches!(Mask::new(g, 0.5, vec![0, 1, 2, 8]), Err(MaskError::IndexOutOfRange(8, 8))));
        assert!(matches!(Mask::new(g, 0.0, vec![]), Err(MaskError::InvalidRatio(_))));
    }

    #[test]
    fn mask_serializes_as_sorted_list() {
        let g = PatchGrid::new([2; 3], [2, 1, 1]).unwrap();
        let m = Mask::new(g, 1.0, vec![1, 0]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"masked\":[0,1]"));
        let back: Mask = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let bad = s.replace("[0,1]", "[0]");
        assert!(serde_json::from_str::<Mask>(&bad).is_err());
    }

    #[test]
    fn voxel_flags_follow_units() {
        let g = PatchGrid::for_volume([4, 2, 2], [2, 2, 2]).unwrap();
        let m = Mask::new(g, 0.5, vec![1]).unwrap();
        let flags = m.voxel_flags();
        assert_eq!(flags.iter().filter(|&&f| f).count(), 8);
        assert!(!flags[0] && !flags[1] && flags[2] && flags[3]);
    }
}
