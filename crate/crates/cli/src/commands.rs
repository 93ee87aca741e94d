use crate::config::{FileConfig, Split, SNAPSHOT};
use crate::CliError;
use anatomask::distill::{
    finetune_seg, load_corpus, overlap_rows, predict, prepare_samples, pretrain, read_mask_log,
    write_corpus, Corpus, FinetuneOutcome, PretrainOptions, PretrainOutcome, Sample, MASK_LOG,
    STUDENT_FINAL,
};
use anatomask::maskgen::{write_overlap_csv, OverlapReport};
use anatomask::metrics::{emit_report, SegReport};
use anatomask::nnet::ParamStore;
use anatomask::volume::load_labels;
use std::fs;
use std::path::{Path, PathBuf};

pub const SEG_REPORT_CSV: &str = "seg_report.csv";
pub const TRAIN_LOSS_CSV: &str = "train_loss.csv";
pub const PROBE_PARAMS: &str = "probe.params";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const RANDOM_DIR: &str = "random";
pub const EVAL_CSV: &str = "eval.csv";
pub const MASK_STATS_CSV: &str = "mask_stats.csv";

fn runtime(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
}

/// How an output directory that already holds artifacts is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Existing {
    /// Refuse unless the directory holds nothing but a snapshot.
    #[default]
    Refuse,
    /// Wipe and start over.
    Force,
    /// Keep contents so a run can continue.
    Keep,
}

/// Creates `out` for a run. `protected` lists input directories that `out`
/// may neither equal, lie inside, nor contain.
pub fn prepare_out(out: &Path, existing: Existing, protected: &[&Path]) -> Result<(), CliError> {
    let out_abs = absolute(out);
    for p in protected {
        let p = absolute(p);
        if out_abs.starts_with(&p) || p.starts_with(&out_abs) {
            return Err(CliError::Config(format!(
                "output directory {} overlaps input {}",
                out.display(),
                p.display()
            )));
        }
    }
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Config(format!("{} is not a directory", out.display())));
        }
        let occupied = fs::read_dir(out)
            .map_err(runtime(out))?
            .filter_map(|e| e.ok())
            .any(|e| e.file_name() != SNAPSHOT);
        match existing {
            Existing::Refuse if occupied => {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    out.display()
                )))
            }
            Existing::Force => fs::remove_dir_all(out).map_err(runtime(out))?,
            _ => {}
        }
    }
    fs::create_dir_all(out).map_err(runtime(out))
}

fn corpus_dir(cfg: &FileConfig) -> Result<&Path, CliError> {
    if cfg.pretrain.corpus.as_os_str().is_empty() {
        return Err(CliError::Config("no corpus given (pretrain.corpus or --corpus)".into()));
    }
    Ok(&cfg.pretrain.corpus)
}

fn load(cfg: &FileConfig) -> Result<Corpus, CliError> {
    let dir = corpus_dir(cfg)?;
    if !dir.exists() {
        return Err(CliError::Runtime(format!("corpus {} does not exist", dir.display())));
    }
    Ok(load_corpus(dir)?)
}

/// Writes the phantom corpus described by `cfg.phantoms` into `out`.
pub fn cmd_phantoms(cfg: &FileConfig, out: &Path, existing: Existing) -> Result<PathBuf, CliError> {
    let p = &cfg.phantoms;
    if p.count == 0 {
        return Err(CliError::Config("phantoms.count must be >= 1".into()));
    }
    p.spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    prepare_out(out, existing, &[])?;
    cfg.write_snapshot(out, "phantoms")?;
    let manifest = write_corpus(out, &p.spec, p.count, p.dims, p.spacing)?;
    let fg: f64 = manifest.entries.iter().map(|e| e.stats.foreground_fraction).sum::<f64>()
        / manifest.entries.len() as f64;
    println!(
        "wrote {} phantoms of {:?} to {} (mean structure fraction {fg:.4})",
        manifest.entries.len(),
        p.dims,
        out.display()
    );
    Ok(out.to_path_buf())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainFlags {
    pub existing: Existing,
    pub resume: bool,
    pub stop_after: Option<u64>,
}

/// One pretraining run of `cfg.pretrain` into `out`.
pub fn cmd_pretrain(cfg: &FileConfig, out: &Path, flags: PretrainFlags) -> Result<PretrainOutcome, CliError> {
    cfg.pretrain.validate()?;
    let corpus = corpus_dir(cfg)?;
    if !corpus.exists() {
        return Err(CliError::Runtime(format!("corpus {} does not exist", corpus.display())));
    }
    let existing = if flags.resume { Existing::Keep } else { flags.existing };
    prepare_out(out, existing, &[corpus])?;
    cfg.write_snapshot(out, "pretrain")?;
    let outcome = pretrain(
        &cfg.pretrain,
        &PretrainOptions {
            run_dir: out.to_path_buf(),
            resume: flags.resume,
            stop_after: flags.stop_after,
        },
    )?;
    for m in &outcome.metrics {
        println!(
            "epoch {:>3}  r_t {:.3}  student {:.5}  teacher {:.5}  overlap {:.3} (baseline {:.3})  {:.1}s",
            m.epoch,
            m.r_t,
            m.student_masked_mse,
            m.teacher_masked_mse,
            m.overlap_fraction,
            m.baseline_fraction,
            m.seconds
        );
    }
    if outcome.completed {
        println!("run complete: {}", out.display());
    } else {
        println!("stopped after epoch {}: {}", outcome.state.epoch, out.display());
    }
    Ok(outcome)
}

/// Parameters named by `finetune.pretrained`: a run directory resolves to
/// its final student weights.
pub fn pretrained_params(path: &Path) -> Result<ParamStore<f32>, CliError> {
    let file = if path.is_dir() { path.join(STUDENT_FINAL) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(CliError::Runtime(format!("pretrained weights {} not found", file.display())));
    }
    Ok(ParamStore::load(&file, None)?.0)
}

fn write_probe(dir: &Path, outcome: &FinetuneOutcome, init: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(runtime(dir))?;
    emit_report(&outcome.history, dir.join(SEG_REPORT_CSV))?;
    let path = dir.join(TRAIN_LOSS_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut rows = vec![["epoch".to_string(), "train_loss".to_string()]];
    rows.extend(outcome.train_loss.iter().enumerate().map(|(i, l)| [(i + 1).to_string(), l.to_string()]));
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(runtime(&path))?;
    outcome
        .params
        .save(dir.join(PROBE_PARAMS), serde_json::json!({ "role": "probe", "init": init }))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "skipped".into(), |x| format!("{x:.4}"))
}

/// Result of `cmd_finetune`: the probe from the configured initialisation
/// and, when requested, the random-initialisation baseline.
#[derive(Debug)]
pub struct FinetuneRuns {
    pub probe: FinetuneOutcome,
    pub random: Option<FinetuneOutcome>,
}

pub fn cmd_finetune(cfg: &FileConfig, out: &Path, existing: Existing) -> Result<FinetuneRuns, CliError> {
    let corpus = load(cfg)?;
    let classes = cfg.finetune.classes.unwrap_or_else(|| corpus.classes());
    let ft = cfg.finetune.to_config(&cfg.pretrain.net, classes);
    ft.validate()?;
    let pretrained = cfg.finetune.pretrained.as_deref().map(pretrained_params).transpose()?;
    prepare_out(out, existing, &[corpus_dir(cfg)?])?;
    cfg.write_snapshot(out, "finetune")?;

    let init = if pretrained.is_some() { "pretrained" } else { "random" };
    let probe = finetune_seg(pretrained.as_ref(), &corpus, &ft)?;
    write_probe(out, &probe, init)?;
    println!(
        "{init} init: held-out DSC {}  NSD {}",
        fmt_opt(probe.report().mean_dsc()),
        fmt_opt(probe.report().mean_nsd())
    );

    let random = if cfg.finetune.compare_random {
        let r = finetune_seg(None, &corpus, &ft)?;
        write_probe(&out.join(RANDOM_DIR), &r, "random")?;
        println!(
            "random init: held-out DSC {}  NSD {}",
            fmt_opt(r.report().mean_dsc()),
            fmt_opt(r.report().mean_nsd())
        );
        let path = out.join(COMPARISON_CSV);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let cell = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |x| x.to_string());
        let rows = [
            ["init", "mean_dsc", "mean_nsd"].map(String::from),
            [init.to_string(), cell(probe.report().mean_dsc()), cell(probe.report().mean_nsd())],
            ["random".to_string(), cell(r.report().mean_dsc()), cell(r.report().mean_nsd())],
        ];
        for row in rows {
            w.write_record(row).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(runtime(&path))?;
        Some(r)
    } else {
        None
    };
    Ok(FinetuneRuns { probe, random })
}

fn split<'a>(samples: &'a [Sample], corpus: &Corpus, split: Split, holdout: f64) -> Result<&'a [Sample], CliError> {
    Ok(match split {
        Split::All => samples,
        Split::HeldOut => {
            let k = corpus.split(holdout)?.1.len();
            &samples[samples.len() - k..]
        }
    })
}

enum Predictions<'a> {
    Checkpoint(ParamStore<f32>),
    Labels(&'a Path),
}

/// Scores a checkpoint or a directory of predicted label files against the
/// corpus labels; writes the mean report as `eval.csv`.
pub fn cmd_eval(cfg: &FileConfig, out: &Path, existing: Existing) -> Result<SegReport, CliError> {
    let e = &cfg.eval;
    if !(cfg.finetune.tau.is_finite() && cfg.finetune.tau >= 0.0) {
        return Err(CliError::Config(format!("tau must be >= 0, got {}", cfg.finetune.tau)));
    }
    let corpus = load(cfg)?;
    let mut protected = vec![corpus_dir(cfg)?];
    let source = match (&e.checkpoint, &e.pred_dir) {
        (Some(c), None) => {
            if !c.exists() {
                return Err(CliError::Runtime(format!("checkpoint {} not found", c.display())));
            }
            Predictions::Checkpoint(ParamStore::load(c, None)?.0)
        }
        (None, Some(d)) => {
            if !d.is_dir() {
                return Err(CliError::Runtime(format!("prediction directory {} not found", d.display())));
            }
            protected.push(d);
            Predictions::Labels(d)
        }
        _ => return Err(CliError::Config("eval needs exactly one of checkpoint or pred_dir".into())),
    };
    prepare_out(out, existing, &protected)?;
    cfg.write_snapshot(out, "eval")?;

    let prepared = prepare_samples(&corpus);
    let chosen = split(&prepared, &corpus, e.split, cfg.finetune.holdout)?;
    let classes = corpus.classes();
    let mut reports = Vec::with_capacity(chosen.len());
    for s in chosen {
        let pred = match &source {
            Predictions::Checkpoint(p) => predict(&cfg.pretrain.net, p, &s.image, classes)?,
            Predictions::Labels(dir) => {
                let entry = corpus
                    .manifest
                    .entries
                    .iter()
                    .find(|en| en.name == s.name)
                    .expect("samples come from the manifest");
                let path = dir.join(&entry.labels);
                if !path.exists() {
                    return Err(CliError::Runtime(format!("prediction {} not found", path.display())));
                }
                load_labels(&path)?
            }
        };
        reports.push(SegReport::evaluate(&pred, &s.labels, cfg.finetune.tau)?);
    }
    let mean = SegReport::mean(&reports).ok_or_else(|| CliError::Runtime("empty evaluation split".into()))?;
    emit_report(&[(0, mean.clone())], out.join(EVAL_CSV))?;
    for c in &mean.per_class {
        println!("class {}: DSC {}  NSD {}", c.class, fmt_opt(c.dsc), fmt_opt(c.nsd));
    }
    println!("mean: DSC {}  NSD {}", fmt_opt(mean.mean_dsc()), fmt_opt(mean.mean_nsd()));
    Ok(mean)
}

/// Late-epoch comparison of masked-unit overlap against the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapObservation {
    pub epochs: Vec<u64>,
    pub overlap: f64,
    pub baseline: f64,
}

impl OverlapObservation {
    /// Averages the aggregate class over the last quarter of epochs (at
    /// least one).
    pub fn late(trajectory: &[(u64, OverlapReport)]) -> Option<Self> {
        if trajectory.is_empty() {
            return None;
        }
        let k = trajectory.len().div_ceil(4);
        let tail = &trajectory[trajectory.len() - k..];
        let mean = |f: fn(&OverlapReport) -> f64| tail.iter().map(|(_, r)| f(r)).sum::<f64>() / k as f64;
        Some(Self {
            epochs: tail.iter().map(|(e, _)| *e).collect(),
            overlap: mean(|r| r.aggregate.overlap_fraction),
            baseline: mean(|r| r.aggregate.baseline_fraction),
        })
    }

    pub fn exceeds(&self) -> bool {
        self.overlap > self.baseline
    }
}

/// Replays a run's mask log against the corpus labels into
/// `mask_stats.csv` (same layout as the run's `overlap.csv`).
pub fn cmd_mask_stats(
    cfg: &FileConfig,
    out: &Path,
    existing: Existing,
) -> Result<Vec<(u64, OverlapReport)>, CliError> {
    let run = cfg
        .mask_stats
        .run
        .as_deref()
        .ok_or_else(|| CliError::Config("mask-stats needs a run directory".into()))?;
    let log_path = run.join(MASK_LOG);
    if !log_path.exists() {
        return Err(CliError::Runtime(format!("mask log {} not found", log_path.display())));
    }
    let corpus = load(cfg)?;
    prepare_out(out, existing, &[corpus_dir(cfg)?, run])?;
    cfg.write_snapshot(out, "mask-stats")?;
    let log = read_mask_log(&log_path)?;
    let trajectory = anatomask::distill::replay_overlap(&log, &corpus)?;
    let path = out.join(MASK_STATS_CSV);
    let f = fs::File::create(&path).map_err(runtime(&path))?;
    write_overlap_csv(std::io::BufWriter::new(f), &overlap_rows(&trajectory))?;
    match OverlapObservation::late(&trajectory) {
        Some(o) => println!(
            "late epochs {}..={}: masked-unit structure overlap {:.4} vs baseline {:.4} ({})",
            o.epochs[0],
            o.epochs[o.epochs.len() - 1],
            o.overlap,
            o.baseline,
            if o.exceeds() { "above baseline" } else { "not above baseline" }
        ),
        None => println!("mask log is empty"),
    }
    Ok(trajectory)
}
