//! A pretraining run on disk: logs, per-epoch checkpoints, resume and replay.
//!
//! Run directory layout:
//! - `metrics.csv`: one row per epoch, fully determined by config and seed
//! - `timing.csv`: wall-clock seconds per epoch
//! - `overlap.csv`: per-class mask/label overlap per epoch
//! - `masks.jsonl`: every final mask with its sample and augmentation
//! - `checkpoint.ckpt`: full state after the last completed epoch
//! - `teacher_init.params`, `teacher.params`, `student.params`

use super::corpus::{load_corpus, Corpus, Sample};
use super::train::{run_epoch, DistillState, EpochMetrics, MaskLogEntry};
use super::{DistillError, Result, RunConfig};
use crate::maskgen::{mask_overlap_report, write_overlap_csv, OverlapReport, OverlapRow};
use crate::nnet::{read_archive, write_archive, OptState, ParamStore, Tensor};
use crate::rng::RngState;
use crate::volume::znorm;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const OVERLAP_CSV: &str = "overlap.csv";
pub const MASK_LOG: &str = "masks.jsonl";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const TEACHER_INIT: &str = "teacher_init.params";
pub const TEACHER_FINAL: &str = "teacher.params";
pub const STUDENT_FINAL: &str = "student.params";

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "r_t",
    "student_masked_mse",
    "teacher_masked_mse",
    "overlap_fraction",
    "baseline_fraction",
];

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub run_dir: PathBuf,
    /// Continue from `checkpoint.ckpt` when present.
    pub resume: bool,
    /// Stop once this many epochs are complete (for staged runs).
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: DistillState,
    /// Epochs run by this call.
    pub metrics: Vec<EpochMetrics>,
    pub completed: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: RunConfig,
    epoch: u64,
    step: u64,
    opt_step: u64,
    rng: RngState,
    fingerprint: String,
}

const CHECKPOINT_KIND: &str = "distill-state";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DistillError + '_ {
    move |source| DistillError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, state: &DistillState) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        config: cfg.clone(),
        epoch: state.epoch,
        step: state.step,
        opt_step: state.opt.step,
        rng: RngState::capture(&state.rng),
        fingerprint: state.student.fingerprint(),
    };
    let tensors = state
        .teacher
        .iter()
        .map(|(n, t)| (format!("teacher.{n}"), t))
        .chain(state.student.iter().map(|(n, t)| (format!("student.{n}"), t)))
        .chain(state.opt.tensors().map(|(n, t)| (format!("opt.{n}"), t)));
    write_archive(path, &serde_json::to_value(&meta)?, tensors)?;
    Ok(())
}

/// Restores a state saved by [`save_checkpoint`] together with its config.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, DistillState)> {
    let archive = read_archive(path)?;
    let bad = |msg: String| DistillError::Resume(format!("{}: {msg}", path.display()));
    let meta: CheckpointMeta =
        serde_json::from_value(archive.meta).map_err(|e| bad(format!("bad metadata: {e}")))?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(bad(format!("not a pretraining checkpoint ({})", meta.kind)));
    }
    let mut teacher = ParamStore::new();
    let mut student = ParamStore::new();
    let mut opt: Vec<(String, Tensor<f32>)> = Vec::new();
    for (name, t) in archive.tensors {
        if let Some(n) = name.strip_prefix("teacher.") {
            teacher.insert(n, t);
        } else if let Some(n) = name.strip_prefix("student.") {
            student.insert(n, t);
        } else if let Some(n) = name.strip_prefix("opt.") {
            opt.push((n.to_string(), t));
        } else {
            return Err(bad(format!("unexpected tensor {name:?}")));
        }
    }
    teacher.check_schema(&student)?;
    if student.fingerprint() != meta.fingerprint {
        return Err(bad("fingerprint does not match stored tensors".into()));
    }
    let state = DistillState {
        teacher,
        student,
        opt: OptState::from_tensors(meta.opt_step, opt)?,
        rng: meta.rng.restore(),
        epoch: meta.epoch,
        step: meta.step,
    };
    Ok((meta.config, state))
}

/// Corpus samples with per-volume z-normalised intensities.
pub fn prepare_samples(corpus: &Corpus) -> Vec<Sample> {
    corpus
        .samples
        .iter()
        .map(|s| Sample {
            name: s.name.clone(),
            image: znorm(&s.image),
            labels: s.labels.clone(),
        })
        .collect()
}

fn metrics_record(m: &EpochMetrics) -> [String; 6] {
    [
        m.epoch.to_string(),
        m.r_t.to_string(),
        m.student_masked_mse.to_string(),
        m.teacher_masked_mse.to_string(),
        m.overlap_fraction.to_string(),
        m.baseline_fraction.to_string(),
    ]
}

fn create_with(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

/// Keeps the header plus every line whose epoch (read by `epoch_of`) is at
/// most `epoch`; drops unparseable tails left by an interrupted write.
fn truncate_log(path: &Path, header: bool, epoch: u64, epoch_of: impl Fn(&str) -> Option<u64>) -> Result<()> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let keep = if header && i == 0 {
            true
        } else {
            matches!(epoch_of(&line), Some(e) if e <= epoch)
        };
        if keep {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    create_with(path, &kept)
}

fn csv_epoch(line: &str) -> Option<u64> {
    line.split(',').next()?.parse().ok()
}

fn json_epoch(line: &str) -> Option<u64> {
    serde_json::from_str::<MaskLogEntry>(line).ok().map(|e| e.epoch)
}

fn csv_line(fields: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(fields)?;
    let bytes = w.into_inner().map_err(|e| DistillError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn fresh_run(dir: &Path, state: &DistillState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    create_with(&dir.join(METRICS_CSV), &(METRICS_HEADER.join(",") + "\n"))?;
    create_with(&dir.join(TIMING_CSV), "epoch,seconds\n")?;
    let mut header = Vec::new();
    write_overlap_csv(&mut header, &[])?;
    create_with(&dir.join(OVERLAP_CSV), std::str::from_utf8(&header).expect("utf-8"))?;
    create_with(&dir.join(MASK_LOG), "")?;
    for f in [CHECKPOINT, TEACHER_FINAL, STUDENT_FINAL] {
        let p = dir.join(f);
        if p.exists() {
            std::fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    state
        .teacher
        .save(dir.join(TEACHER_INIT), serde_json::json!({ "role": "teacher", "epoch": 0 }))?;
    Ok(())
}

fn resume_run(dir: &Path, cfg: &RunConfig) -> Result<DistillState> {
    let (saved, state) = load_checkpoint(&dir.join(CHECKPOINT))?;
    if &saved != cfg {
        return Err(DistillError::Resume(
            "configuration differs from the one the checkpoint was written with".into(),
        ));
    }
    let e = state.epoch;
    truncate_log(&dir.join(METRICS_CSV), true, e, csv_epoch)?;
    truncate_log(&dir.join(TIMING_CSV), true, e, csv_epoch)?;
    truncate_log(&dir.join(OVERLAP_CSV), true, e, csv_epoch)?;
    truncate_log(&dir.join(MASK_LOG), false, e, json_epoch)?;
    Ok(state)
}

/// Runs (or continues) pretraining into `opts.run_dir`. The corpus is loaded
/// and verified before any training or output happens.
pub fn pretrain(cfg: &RunConfig, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus)?;
    let dims = corpus.manifest.dims;
    if (0..3).any(|a| cfg.patch[a] > dims[a]) {
        return Err(DistillError::Config(format!(
            "patch {:?} larger than corpus volumes {:?}",
            cfg.patch, dims
        )));
    }
    let samples = prepare_samples(&corpus);
    let dir = opts.run_dir.as_path();
    let mut state = if opts.resume && dir.join(CHECKPOINT).exists() {
        resume_run(dir, cfg)?
    } else {
        let s = DistillState::init(cfg)?;
        fresh_run(dir, &s)?;
        s
    };

    let total = cfg.schedule.total_epochs;
    let limit = opts.stop_after.map_or(total, |s| s.min(total));
    let mut metrics = Vec::new();
    while state.epoch < limit {
        let mask_path = dir.join(MASK_LOG);
        let mut masks = append(&mask_path)?;
        let m = run_epoch(&mut state, cfg, &samples, |step| {
            for e in &step.masks {
                serde_json::to_writer(&mut masks, e)?;
                masks.write_all(b"\n").map_err(io_err(&mask_path))?;
            }
            Ok(())
        })?;
        masks.flush().map_err(io_err(&mask_path))?;
        drop(masks);

        let p = dir.join(METRICS_CSV);
        let mut w = append(&p)?;
        w.write_all(csv_line(&metrics_record(&m))?.as_bytes()).map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;
        let p = dir.join(TIMING_CSV);
        let mut w = append(&p)?;
        writeln!(w, "{},{}", m.epoch, m.seconds).map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;
        let p = dir.join(OVERLAP_CSV);
        let rows = m.overlap.as_ref().expect("epoch overlap").rows(m.epoch);
        let mut body = Vec::new();
        write_overlap_csv(&mut body, &rows)?;
        let body = String::from_utf8(body).expect("utf-8");
        let mut w = append(&p)?;
        // Skip the header line the writer always emits.
        w.write_all(body.split_once('\n').map_or("", |(_, rest)| rest).as_bytes())
            .map_err(io_err(&p))?;
        w.flush().map_err(io_err(&p))?;

        save_checkpoint(&dir.join(CHECKPOINT), cfg, &state)?;
        metrics.push(m);
    }
    let completed = state.epoch >= total;
    if completed {
        let meta = |role: &str| serde_json::json!({ "role": role, "epoch": state.epoch });
        state.teacher.save(dir.join(TEACHER_FINAL), meta("teacher"))?;
        state.student.save(dir.join(STUDENT_FINAL), meta("student"))?;
    }
    Ok(PretrainOutcome {
        state,
        metrics,
        completed,
    })
}

/// A parsed `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub r_t: f64,
    pub student_masked_mse: f64,
    pub teacher_masked_mse: f64,
    pub overlap_fraction: f64,
    pub baseline_fraction: f64,
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(DistillError::Corpus(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| DistillError::Corpus(format!("{}: bad value {:?}", path.display(), &rec[i])))
        };
        rows.push(MetricsRow {
            epoch: rec[0]
                .parse()
                .map_err(|_| DistillError::Corpus(format!("{}: bad epoch", path.display())))?,
            r_t: f(1)?,
            student_masked_mse: f(2)?,
            teacher_masked_mse: f(3)?,
            overlap_fraction: f(4)?,
            baseline_fraction: f(5)?,
        });
    }
    Ok(rows)
}

pub fn read_mask_log(path: impl AsRef<Path>) -> Result<Vec<MaskLogEntry>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            DistillError::Corpus(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Recomputes the per-epoch overlap from logged masks: each mask is scored
/// against its sample's labels under the logged augmentation, and reports
/// are averaged per epoch in log order.
pub fn replay_overlap(log: &[MaskLogEntry], corpus: &Corpus) -> Result<Vec<(u64, OverlapReport)>> {
    let by_name: BTreeMap<&str, &Sample> =
        corpus.samples.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut per_epoch: BTreeMap<u64, Vec<OverlapReport>> = BTreeMap::new();
    for e in log {
        let s = by_name
            .get(e.sample.as_str())
            .ok_or_else(|| DistillError::Corpus(format!("unknown sample {:?} in mask log", e.sample)))?;
        let labels = e.augment.apply_labels(&s.labels)?;
        per_epoch
            .entry(e.epoch)
            .or_default()
            .push(mask_overlap_report(&e.mask, &labels)?);
    }
    Ok(per_epoch
        .into_iter()
        .map(|(k, v)| (k, OverlapReport::mean(&v).expect("non-empty group")))
        .collect())
}

/// Overlap rows for a replayed trajectory, in `overlap.csv` order.
pub fn overlap_rows(trajectory: &[(u64, OverlapReport)]) -> Vec<OverlapRow> {
    trajectory.iter().flat_map(|(e, r)| r.rows(*e)).collect()
}
