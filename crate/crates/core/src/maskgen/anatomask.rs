use super::grid::{budget, ceil_count, check_ratio};
use super::{LossMap, Mask, MaskError, PatchGrid, Result};
use crate::rng::Rng;
use crate::volume::Volume;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which end of the loss ranking feeds the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Significance {
    /// Highest reconstruction losses first.
    #[default]
    High,
    /// Lowest reconstruction losses first.
    Low,
}

/// Draws `count` distinct units from `0..n` minus `excluded`, one at a time:
/// each draw picks position `gen_range(0..remaining)` in the ascending list of
/// still-available units.
fn sample_units(n: usize, excluded: &[usize], count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut skip = vec![false; n];
    for &u in excluded {
        skip[u] = true;
    }
    let mut pool: Vec<usize> = (0..n).filter(|&u| !skip[u]).collect();
    debug_assert!(count <= pool.len());
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let j = rng.gen_range(0..pool.len());
        out.push(pool.remove(j));
    }
    out
}

/// Uniform mask hiding exactly `ceil(gamma * n)` units.
pub fn random_mask(grid: &PatchGrid, gamma: f64, rng: &mut Rng) -> Result<Mask> {
    check_ratio(gamma)?;
    let n = grid.n();
    let units = sample_units(n, &[], budget(gamma, n), rng);
    Mask::new(*grid, gamma, units)
}

/// Per-unit mean squared error over the masked units of `mask`.
pub fn unit_losses(recon: &Volume, target: &Volume, mask: &Mask) -> Result<LossMap> {
    if recon.dims() != target.dims() {
        return Err(MaskError::DimsMismatch {
            volume: recon.dims(),
            grid: target.dims(),
        });
    }
    unit_losses_from_slice(recon.data(), target, mask)
}

/// [`unit_losses`] for a reconstruction held as a flat x-fastest slice.
pub fn unit_losses_from_slice(recon: &[f32], target: &Volume, mask: &Mask) -> Result<LossMap> {
    let grid = mask.grid();
    grid.check_dims(target.dims())?;
    if recon.len() != target.len() {
        return Err(MaskError::DimsMismatch {
            volume: target.dims(),
            grid: grid.gdims,
        });
    }
    let flags = mask.unit_flags();
    let mut sums = vec![0.0f64; grid.n()];
    let [h, w, d] = target.dims();
    let t = target.data();
    let mut i = 0;
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let u = grid.unit_of(x, y, z);
                if flags[u] {
                    let r = recon[i] as f64 - t[i] as f64;
                    sums[u] += r * r;
                }
                i += 1;
            }
        }
    }
    let per_unit = grid.unit_voxels() as f64;
    let entries: BTreeMap<usize, f64> = mask
        .masked()
        .iter()
        .map(|&u| (u, sums[u] / per_unit))
        .collect();
    LossMap::new(*grid, entries)
}

/// Builds the final mask from the teacher's loss map.
///
/// With budget `B = ceil(gamma * n)` and `k = ceil(r_t * B)`, the `k` initially
/// masked units ranked first by `significance` (ties by ascending unit index)
/// are kept, and the remaining `B - k` units are sampled uniformly from all
/// other units of the grid.
pub fn anatomask(
    losses: &LossMap,
    initial: &Mask,
    gamma: f64,
    r_t: f64,
    significance: Significance,
    rng: &mut Rng,
) -> Result<Mask> {
    check_ratio(gamma)?;
    if !(0.0..=1.0).contains(&r_t) {
        return Err(MaskError::InvalidSignificance(r_t));
    }
    if gamma != initial.ratio() {
        return Err(MaskError::RatioMismatch {
            given: gamma,
            initial: initial.ratio(),
        });
    }
    if !losses.matches(initial) {
        return Err(MaskError::DomainMismatch);
    }
    let grid = initial.grid();
    let n = grid.n();
    let b = budget(gamma, n);
    let k = ceil_count(r_t * b as f64).min(b).min(initial.len());

    // `masked()` is ascending, so a stable sort keeps index order among ties.
    let mut ranked: Vec<(usize, f64)> = initial
        .masked()
        .iter()
        .map(|&u| (u, losses.get(u).expect("domain checked")))
        .collect();
    match significance {
        Significance::High => ranked.sort_by(|a, b| b.1.total_cmp(&a.1)),
        Significance::Low => ranked.sort_by(|a, b| a.1.total_cmp(&b.1)),
    }
    let top: Vec<usize> = ranked[..k].iter().map(|&(u, _)| u).collect();
    let fill = sample_units(n, &top, b - k, rng);
    let mut units = top;
    units.extend(fill);
    Mask::new(*grid, gamma, units)
}
