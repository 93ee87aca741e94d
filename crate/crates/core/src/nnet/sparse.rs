use super::{NnError, Result};
use std::sync::Arc;

/// Active/inactive flag per spatial site of one scale, x-fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Occupancy {
    dims: [usize; 3],
    active: Vec<bool>,
}

impl Occupancy {
    pub fn new(dims: [usize; 3], active: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != active.len() || dims.contains(&0) {
            return Err(NnError::Shape(format!(
                "occupancy dims {dims:?} vs {} flags",
                active.len()
            )));
        }
        Ok(Self { dims, active })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            active: vec![true; dims.iter().product()],
        }
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            active: vec![false; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn flags(&self) -> &[bool] {
        &self.active
    }

    #[inline]
    pub fn is_active(&self, site: usize) -> bool {
        self.active[site]
    }

    pub fn count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Coarser occupancy: a parent site is active iff any of its 2x2x2
    /// children is active.
    pub fn downsample(&self) -> Result<Self> {
        let [h, w, d] = self.dims;
        if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
            return Err(NnError::Indivisible {
                dims: self.dims,
                factor: 2,
            });
        }
        let out = [h / 2, w / 2, d / 2];
        let mut active = vec![false; out.iter().product()];
        for z in 0..d {
            for y in 0..w {
                for x in 0..h {
                    if self.active[x + h * (y + w * z)] {
                        active[x / 2 + out[0] * (y / 2 + out[1] * (z / 2))] = true;
                    }
                }
            }
        }
        Ok(Self { dims: out, active })
    }
}

/// Occupancy at every encoder scale, finest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSiteMap {
    scales: Vec<Arc<Occupancy>>,
}

impl ActiveSiteMap {
    /// Builds scales `0..=levels` from voxel visibility (visible = active).
    pub fn from_visibility(dims: [usize; 3], visible: Vec<bool>, levels: usize) -> Result<Self> {
        let mut scales = vec![Arc::new(Occupancy::new(dims, visible)?)];
        for _ in 0..levels {
            let next = scales.last().expect("non-empty").downsample()?;
            scales.push(Arc::new(next));
        }
        Ok(Self { scales })
    }

    pub fn full(dims: [usize; 3], levels: usize) -> Result<Self> {
        Self::from_visibility(dims, vec![true; dims.iter().product()], levels)
    }

    pub fn scale(&self, s: usize) -> &Occupancy {
        &self.scales[s]
    }

    pub fn shared(&self, s: usize) -> Arc<Occupancy> {
        Arc::clone(&self.scales[s])
    }

    pub fn levels(&self) -> usize {
        self.scales.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn downsample_is_any_child() {
        let mut flags = vec![false; 4 * 4 * 2];
        flags[3 + 4 * (1 + 4)] = true; // (3, 1, 1)
        let o = Occupancy::new([4, 4, 2], flags).unwrap();
        let p = o.downsample().unwrap();
        assert_eq!(p.dims(), [2, 2, 1]);
        assert_eq!(p.flags(), &[false, true, false, false]);
        assert!(Occupancy::full([3, 2, 2]).downsample().is_err());
    }

    proptest! {
        #[test]
        fn parents_active_iff_some_child(bits in prop::collection::vec(any::<bool>(), 64)) {
            let map = ActiveSiteMap::from_visibility([4, 4, 4], bits.clone(), 2).unwrap();
            for s in 0..2 {
                let (fine, coarse) = (map.scale(s), map.scale(s + 1));
                let [h, w, d] = coarse.dims();
                let [fh, fw, _] = fine.dims();
                for z in 0..d { for y in 0..w { for x in 0..h {
                    let mut any = false;
                    for c in 0..8 {
                        let (cx, cy, cz) = (2 * x + (c & 1), 2 * y + ((c >> 1) & 1), 2 * z + (c >> 2));
                        any |= fine.is_active(cx + fh * (cy + fw * cz));
                    }
                    prop_assert_eq!(coarse.is_active(x + h * (y + w * z)), any);
                }}}
            }
        }
    }
}
