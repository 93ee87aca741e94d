//! Cell matrix runner: one pretraining run plus a segmentation probe per
//! cell, then a ranked summary read back from the cells' own files.

use crate::commands::{cmd_finetune, cmd_pretrain, prepare_out, Existing, PretrainFlags, SEG_REPORT_CSV};
use crate::config::FileConfig;
use crate::CliError;
use anatomask::distill::{
    read_metrics, Direction, Strategy, CHECKPOINT, METRICS_CSV, STUDENT_FINAL, TEACHER_FINAL,
    TEACHER_INIT,
};
use anatomask::maskgen::Significance;
use anatomask::metrics::read_report;
use anatomask::nnet::{DecoderVariant, ParamStore};
use std::cmp::Ordering;
use std::path::{Path, PathBuf};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const PROBE_DIR: &str = "probe";
pub const SUMMARY_HEADER: [&str; 12] = [
    "rank",
    "cell",
    "decoder",
    "self_distillation",
    "significance",
    "direction",
    "gamma",
    "final_student_mse",
    "final_teacher_mse",
    "probe_dsc",
    "probe_nsd",
    "teacher_frozen",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblateCell {
    pub name: String,
    pub decoder: DecoderVariant,
    pub strategy: Strategy,
    pub gamma: f64,
}

fn decoder_name(d: DecoderVariant) -> &'static str {
    match d {
        DecoderVariant::Hierarchical => "hierarchical",
        DecoderVariant::Simple => "simple",
    }
}

fn significance_name(s: Significance) -> &'static str {
    match s {
        Significance::High => "high",
        Significance::Low => "low",
    }
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::EasyToHard => "easy-to-hard",
        Direction::HardToEasy => "hard-to-easy",
    }
}

/// Cells in enumeration order; names are prefixed with the cell index so
/// repeated settings still get distinct directories.
pub fn cells(cfg: &FileConfig) -> Vec<AblateCell> {
    let a = &cfg.ablate;
    let mut out = Vec::new();
    for &decoder in &a.decoders {
        for &sd in &a.self_distillation {
            for &significance in &a.significance {
                for &direction in &a.direction {
                    for &gamma in &a.gammas {
                        let strategy = Strategy {
                            self_distillation: sd,
                            significance,
                            direction,
                        };
                        out.push(AblateCell {
                            name: format!(
                                "{:02}-{}-{}-g{gamma}",
                                out.len(),
                                decoder_name(decoder),
                                strategy.label()
                            ),
                            decoder,
                            strategy,
                            gamma,
                        });
                    }
                }
            }
        }
    }
    out
}

/// The full configuration a cell runs with.
pub fn cell_config(base: &FileConfig, cell: &AblateCell, dir: &Path) -> FileConfig {
    let mut c = base.clone();
    c.pretrain.net.decoder = cell.decoder;
    c.pretrain.strategy = cell.strategy;
    c.pretrain.gamma = cell.gamma;
    c.finetune.epochs = base.ablate.probe_epochs;
    c.finetune.pretrained = Some(dir.to_path_buf());
    c.finetune.compare_random = false;
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub rank: usize,
    pub cell: AblateCell,
    pub final_student_mse: f64,
    pub final_teacher_mse: f64,
    pub probe_dsc: Option<f64>,
    pub probe_nsd: Option<f64>,
    /// Final teacher weights bit-identical to the teacher's initialisation.
    pub teacher_frozen: bool,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Reads a finished cell's figures back from its files.
pub fn read_cell(cell: &AblateCell, dir: &Path) -> Result<SummaryRow, CliError> {
    let metrics = read_metrics(dir.join(METRICS_CSV))?;
    let last = metrics
        .last()
        .ok_or_else(|| CliError::Runtime(format!("{}: no epochs logged", dir.display())))?;
    let report = read_report(dir.join(PROBE_DIR).join(SEG_REPORT_CSV))?;
    let final_epoch = report.iter().map(|r| r.epoch).max();
    let mean = report
        .iter()
        .find(|r| Some(r.epoch) == final_epoch && r.class.is_none())
        .ok_or_else(|| CliError::Runtime(format!("{}: probe report has no mean row", dir.display())))?;
    let init = ParamStore::load(dir.join(TEACHER_INIT), None)?.0;
    let fin = ParamStore::load(dir.join(TEACHER_FINAL), None)?.0;
    Ok(SummaryRow {
        rank: 0,
        cell: cell.clone(),
        final_student_mse: last.student_masked_mse,
        final_teacher_mse: last.teacher_masked_mse,
        probe_dsc: mean.dsc,
        probe_nsd: mean.nsd,
        teacher_frozen: init.bit_equal(&fin),
    })
}

/// Best probe DSC first (cells without a score last), then lower final
/// student loss, then enumeration order.
pub fn rank(rows: &mut [SummaryRow]) {
    rows.sort_by(|a, b| {
        let dsc = match (a.probe_dsc, b.probe_dsc) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        dsc.then(a.final_student_mse.total_cmp(&b.final_student_mse))
            .then_with(|| a.cell.name.cmp(&b.cell.name))
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(SUMMARY_HEADER).map_err(err)?;
    let cell = |v: Option<f64>| v.map_or_else(|| "skipped".to_string(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.rank.to_string(),
            r.cell.name.clone(),
            decoder_name(r.cell.decoder).to_string(),
            r.cell.strategy.self_distillation.to_string(),
            significance_name(r.cell.strategy.significance).to_string(),
            direction_name(r.cell.strategy.direction).to_string(),
            r.cell.gamma.to_string(),
            r.final_student_mse.to_string(),
            r.final_teacher_mse.to_string(),
            cell(r.probe_dsc),
            cell(r.probe_nsd),
            r.teacher_frozen.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(io(path))
}

/// Runs every cell into `out/<cell>` and writes `out/summary.csv`. With
/// `existing = Keep`, finished cells are reused and interrupted ones resumed.
pub fn cmd_ablate(cfg: &FileConfig, out: &Path, existing: Existing) -> Result<Vec<SummaryRow>, CliError> {
    let list = cells(cfg);
    if list.is_empty() {
        return Err(CliError::Config("ablation matrix is empty".into()));
    }
    for cell in &list {
        let mut c = cfg.pretrain.clone();
        c.net.decoder = cell.decoder;
        c.strategy = cell.strategy;
        c.gamma = cell.gamma;
        c.validate()?;
    }
    if cfg.pretrain.corpus.as_os_str().is_empty() {
        return Err(CliError::Config("no corpus given (pretrain.corpus or --corpus)".into()));
    }
    prepare_out(out, existing, &[&cfg.pretrain.corpus])?;
    cfg.write_snapshot(out, "ablate")?;

    let mut rows = Vec::with_capacity(list.len());
    for (i, cell) in list.iter().enumerate() {
        let dir: PathBuf = out.join(&cell.name);
        let c = cell_config(cfg, cell, &dir);
        println!("[{}/{}] {}", i + 1, list.len(), cell.name);
        let done = dir.join(STUDENT_FINAL).exists() && dir.join(TEACHER_FINAL).exists();
        if !(existing == Existing::Keep && done) {
            let resume = existing == Existing::Keep && dir.join(CHECKPOINT).exists();
            cmd_pretrain(
                &c,
                &dir,
                PretrainFlags {
                    existing: Existing::Force,
                    resume,
                    stop_after: None,
                },
            )?;
        }
        cmd_finetune(&c, &dir.join(PROBE_DIR), Existing::Force)?;
        rows.push(read_cell(cell, &dir)?);
    }
    rank(&mut rows);
    write_summary(&out.join(SUMMARY_CSV), &rows)?;
    println!("rank  cell                                   student_mse  probe_dsc");
    for r in &rows {
        println!(
            "{:>4}  {:<38} {:>11.5}  {}",
            r.rank,
            r.cell.name,
            r.final_student_mse,
            r.probe_dsc.map_or_else(|| "skipped".into(), |d| format!("{d:.4}"))
        );
    }
    Ok(rows)
}
