//! Segmentation quality: Dice coefficient and normalized surface Dice.
//!
//! Both metrics return `None` ("skipped") for a class absent from both
//! volumes. A class present in only one of them scores 0.

use crate::volume::LabelVolume;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("tolerance must be finite and non-negative, got {0}")]
    InvalidTolerance(f64),
    #[error("spacing must be finite and positive, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: malformed report: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn check_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimsMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)` over voxels labelled `class`.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class: u16) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (p + g) as f64))
}

/// Boundary voxels of the binary mask of `class`: foreground voxels with at
/// least one 6-neighbour that is background or outside the volume.
pub fn boundary(labels: &LabelVolume, class: u16) -> Vec<[usize; 3]> {
    let [h, w, d] = labels.dims();
    let inside = |x: usize, y: usize, z: usize| labels.get(x, y, z) == class;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..w {
            for x in 0..h {
                if !inside(x, y, z) {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == h || y + 1 == w || z + 1 == d;
                if edge
                    || !inside(x - 1, y, z)
                    || !inside(x + 1, y, z)
                    || !inside(x, y - 1, z)
                    || !inside(x, y + 1, z)
                    || !inside(x, y, z - 1)
                    || !inside(x, y, z + 1)
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Normalized surface Dice with tolerance `tau` in voxels.
pub fn nsd(pred: &LabelVolume, gt: &LabelVolume, class: u16, tau: f64) -> Result<Option<f64>> {
    nsd_spaced(pred, gt, class, tau, [1.0; 3])
}

/// Normalized surface Dice with distances scaled per axis by `spacing`, so
/// `tau` is in the same physical unit as `spacing`.
pub fn nsd_spaced(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class: u16,
    tau: f64,
    spacing: [f64; 3],
) -> Result<Option<f64>> {
    check_dims(pred, gt)?;
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(MetricsError::InvalidTolerance(tau));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(MetricsError::InvalidSpacing(spacing));
    }
    let bp = boundary(pred, class);
    let bg = boundary(gt, class);
    if bp.is_empty() && bg.is_empty() {
        return Ok(None);
    }
    let dims = pred.dims();
    let covered_p = within(&bp, &bg, dims, tau, spacing);
    let covered_g = within(&bg, &bp, dims, tau, spacing);
    Ok(Some(
        (covered_p + covered_g) as f64 / (bp.len() + bg.len()) as f64,
    ))
}

/// How many points of `from` have a point of `to` within `tau`; searches
/// only the axis-aligned box of half-width `tau / spacing` around each point.
fn within(from: &[[usize; 3]], to: &[[usize; 3]], dims: [usize; 3], tau: f64, sp: [f64; 3]) -> usize {
    if to.is_empty() {
        return 0;
    }
    let [h, w, _] = dims;
    let mut flag = vec![false; dims.iter().product()];
    for p in to {
        flag[p[0] + h * (p[1] + w * p[2])] = true;
    }
    let reach = [0, 1, 2].map(|a| (tau / sp[a]).floor() as usize);
    let tau2 = tau * tau;
    from.iter()
        .filter(|p| {
            let lo = [0, 1, 2].map(|a| p[a].saturating_sub(reach[a]));
            let hi = [0, 1, 2].map(|a| (p[a] + reach[a]).min(dims[a] - 1));
            for z in lo[2]..=hi[2] {
                let dz = (z as f64 - p[2] as f64) * sp[2];
                for y in lo[1]..=hi[1] {
                    let dy = (y as f64 - p[1] as f64) * sp[1];
                    for x in lo[0]..=hi[0] {
                        if !flag[x + h * (y + w * z)] {
                            continue;
                        }
                        let dx = (x as f64 - p[0] as f64) * sp[0];
                        if dx * dx + dy * dy + dz * dz <= tau2 {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u16,
    pub dsc: Option<f64>,
    pub nsd: Option<f64>,
}

/// Per-class scores for foreground classes `1..classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub classes: u16,
    pub tau: f64,
    pub per_class: Vec<ClassScore>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl SegReport {
    pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, tau: f64) -> Result<Self> {
        check_dims(pred, gt)?;
        let classes = gt.classes().max(pred.classes());
        let per_class = (1..classes)
            .map(|k| {
                Ok(ClassScore {
                    class: k,
                    dsc: dsc(pred, gt, k)?,
                    nsd: nsd(pred, gt, k, tau)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            classes,
            tau,
            per_class,
        })
    }

    /// Mean DSC over non-skipped classes.
    pub fn mean_dsc(&self) -> Option<f64> {
        mean_present(self.per_class.iter().map(|c| c.dsc))
    }

    /// Mean NSD over non-skipped classes.
    pub fn mean_nsd(&self) -> Option<f64> {
        mean_present(self.per_class.iter().map(|c| c.nsd))
    }

    /// Per-class mean over several cases, skipping cases where the class is
    /// skipped. `None` for an empty slice.
    pub fn mean(reports: &[SegReport]) -> Option<SegReport> {
        let first = reports.first()?;
        let per_class = (0..first.per_class.len())
            .map(|i| ClassScore {
                class: first.per_class[i].class,
                dsc: mean_present(reports.iter().map(|r| r.per_class[i].dsc)),
                nsd: mean_present(reports.iter().map(|r| r.per_class[i].nsd)),
            })
            .collect();
        Some(SegReport {
            classes: first.classes,
            tau: first.tau,
            per_class,
        })
    }
}

pub const REPORT_HEADER: [&str; 4] = ["epoch", "class", "dsc", "nsd"];
const SKIPPED: &str = "skipped";
const AGGREGATE: &str = "mean";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| SKIPPED.to_string(), |x| x.to_string())
}

/// One row per (epoch, class) plus a `mean` row per epoch.
pub fn write_report<W: Write>(out: W, history: &[(u64, SegReport)]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for (epoch, r) in history {
        for c in &r.per_class {
            w.write_record([epoch.to_string(), c.class.to_string(), cell(c.dsc), cell(c.nsd)])?;
        }
        w.write_record([
            epoch.to_string(),
            AGGREGATE.to_string(),
            cell(r.mean_dsc()),
            cell(r.mean_nsd()),
        ])?;
    }
    w.flush()
}

pub fn emit_report(history: &[(u64, SegReport)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = std::fs::File::create(path).map_err(io)?;
    write_report(std::io::BufWriter::new(f), history).map_err(io)
}

/// A parsed report row; `class` is `None` for the aggregate row.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub epoch: u64,
    pub class: Option<u16>,
    pub dsc: Option<f64>,
    pub nsd: Option<f64>,
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let bad = |msg: String| MetricsError::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::Reader::from_path(path).map_err(|source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let header = r.headers().map_err(|source| MetricsError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let value = |s: &str| -> Result<Option<f64>> {
        if s == SKIPPED {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| bad(format!("bad value {s:?}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|source| MetricsError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let epoch = rec[0].parse().map_err(|_| bad(format!("bad epoch {:?}", &rec[0])))?;
        let class = match &rec[1] {
            AGGREGATE => None,
            s => Some(s.parse().map_err(|_| bad(format!("bad class {s:?}")))?),
        };
        rows.push(ReportRow {
            epoch,
            class,
            dsc: value(&rec[2])?,
            nsd: value(&rec[3])?,
        });
    }
    Ok(rows)
}
