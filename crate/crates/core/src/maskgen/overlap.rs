//! How often masked units land on labelled structures, compared with how often
//! a uniformly chosen unit would.

use super::{Mask, MaskError, Result};
use crate::volume::LabelVolume;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassOverlap {
    /// Fraction of masked units containing at least one voxel of the class.
    pub overlap_fraction: f64,
    /// Fraction of all grid units containing the class: the expected overlap
    /// of a uniform random mask.
    pub baseline_fraction: f64,
    /// Fraction of voxels carrying the class.
    pub voxel_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Indexed by class id; entry 0 (background) is unused and zero.
    pub per_class: Vec<ClassOverlap>,
    /// Any non-background class.
    pub aggregate: ClassOverlap,
}

pub fn mask_overlap_report(mask: &Mask, labels: &LabelVolume) -> Result<OverlapReport> {
    let grid = mask.grid();
    grid.check_dims(labels.dims())?;
    let classes = labels.classes() as usize;
    let n = grid.n();
    // hits[u][k]: unit u contains class k; slot `classes` means any foreground.
    let width = classes + 1;
    let mut hits = vec![false; n * width];
    let mut voxels = vec![0usize; width];
    let [h, w, d] = labels.dims();
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                let l = labels.get(x, y, z) as usize;
                if l == 0 {
                    continue;
                }
                let u = grid.unit_of(x, y, z);
                hits[u * width + l] = true;
                hits[u * width + classes] = true;
                voxels[l] += 1;
                voxels[classes] += 1;
            }
        }
    }
    let total_voxels = labels.data().len() as f64;
    let masked = mask.masked();
    let stats = |k: usize| {
        let in_mask = masked.iter().filter(|&&u| hits[u * width + k]).count();
        let in_grid = (0..n).filter(|&u| hits[u * width + k]).count();
        ClassOverlap {
            overlap_fraction: in_mask as f64 / masked.len() as f64,
            baseline_fraction: in_grid as f64 / n as f64,
            voxel_fraction: voxels[k] as f64 / total_voxels,
        }
    };
    let mut per_class = vec![
        ClassOverlap {
            overlap_fraction: 0.0,
            baseline_fraction: 0.0,
            voxel_fraction: 0.0,
        };
        classes
    ];
    for (k, slot) in per_class.iter_mut().enumerate().skip(1) {
        *slot = stats(k);
    }
    Ok(OverlapReport {
        per_class,
        aggregate: stats(classes),
    })
}

impl OverlapReport {
    /// Element-wise mean over several reports with the same class count.
    pub fn mean(reports: &[OverlapReport]) -> Option<OverlapReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |get: &dyn Fn(&OverlapReport) -> ClassOverlap| {
            let mut acc = ClassOverlap {
                overlap_fraction: 0.0,
                baseline_fraction: 0.0,
                voxel_fraction: 0.0,
            };
            for r in reports {
                let c = get(r);
                acc.overlap_fraction += c.overlap_fraction;
                acc.baseline_fraction += c.baseline_fraction;
                acc.voxel_fraction += c.voxel_fraction;
            }
            acc.overlap_fraction /= n;
            acc.baseline_fraction /= n;
            acc.voxel_fraction /= n;
            acc
        };
        let per_class = (0..first.per_class.len())
            .map(|k| avg(&|r: &OverlapReport| r.per_class[k]))
            .collect();
        Some(OverlapReport {
            per_class,
            aggregate: avg(&|r: &OverlapReport| r.aggregate),
        })
    }

    /// CSV rows for one epoch: one per foreground class, then `all`.
    pub fn rows(&self, epoch: u64) -> Vec<OverlapRow> {
        let mut rows: Vec<OverlapRow> = self
            .per_class
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| OverlapRow {
                epoch,
                class: k.to_string(),
                overlap_fraction: c.overlap_fraction,
                baseline_fraction: c.baseline_fraction,
            })
            .collect();
        rows.push(OverlapRow {
            epoch,
            class: "all".into(),
            overlap_fraction: self.aggregate.overlap_fraction,
            baseline_fraction: self.aggregate.baseline_fraction,
        });
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub epoch: u64,
    pub class: String,
    pub overlap_fraction: f64,
    pub baseline_fraction: f64,
}

pub fn write_overlap_csv<W: Write>(out: W, rows: &[OverlapRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "class", "overlap_fraction", "baseline_fraction"])?;
    for r in rows {
        w.serialize((r.epoch, &r.class, r.overlap_fraction, r.baseline_fraction))?;
    }
    w.flush().map_err(MaskError::Io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{random_mask, PatchGrid};
    use crate::rng::seeded;

    fn setup() -> (PatchGrid, Mask) {
        let g = PatchGrid::for_volume([4, 4, 4], [2, 2, 2]).unwrap();
        let m = random_mask(&g, 0.5, &mut seeded(3)).unwrap();
        (g, m)
    }

    #[test]
    fn background_only_has_zero_overlap() {
        let (_, m) = setup();
        let l = LabelVolume::background([4, 4, 4], 3).unwrap();
        let r = mask_overlap_report(&m, &l).unwrap();
        assert_eq!(r.aggregate.overlap_fraction, 0.0);
        assert!(r.per_class.iter().all(|c| c.overlap_fraction == 0.0));
    }

    #[test]
    fn full_class_has_unit_overlap() {
        let (_, m) = setup();
        let l = LabelVolume::from_fn([4, 4, 4], 2, |_, _, _| 1).unwrap();
        let r = mask_overlap_report(&m, &l).unwrap();
        assert_eq!(r.per_class[1].overlap_fraction, 1.0);
        assert_eq!(r.aggregate.overlap_fraction, 1.0);
        assert_eq!(r.aggregate.baseline_fraction, 1.0);
    }

    #[test]
    fn single_labelled_unit_counts_once() {
        let (g, m) = setup();
        let target = m.masked()[1];
        let [gx, gy, gz] = g.unit_coords(target);
        let l = LabelVolume::from_fn([4, 4, 4], 3, |x, y, z| {
            u16::from(x / 2 == gx && y / 2 == gy && z / 2 == gz && x % 2 == 0) * 2
        })
        .unwrap();
        let r = mask_overlap_report(&m, &l).unwrap();
        assert_eq!(r.per_class[2].overlap_fraction, 1.0 / m.len() as f64);
        assert_eq!(r.per_class[1].overlap_fraction, 0.0);
        assert_eq!(r.per_class[2].baseline_fraction, 1.0 / 8.0);
        assert_eq!(r.per_class[2].voxel_fraction, 4.0 / 64.0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let (_, m) = setup();
        let l = LabelVolume::background([4, 4, 2], 2).unwrap();
        assert!(mask_overlap_report(&m, &l).is_err());
    }

    #[test]
    fn csv_has_one_row_per_class_plus_aggregate() {
        let (_, m) = setup();
        let l = LabelVolume::from_fn([4, 4, 4], 3, |x, _, _| (x % 3) as u16).unwrap();
        let r = mask_overlap_report(&m, &l).unwrap();
        let mut buf = Vec::new();
        write_overlap_csv(&mut buf, &r.rows(7)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,class,overlap_fraction,baseline_fraction");
        assert_eq!(lines.len(), 1 + 2 + 1);
        assert!(lines[3].starts_with("7,all,"));
    }
}
