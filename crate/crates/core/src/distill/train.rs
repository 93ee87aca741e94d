//! One teacher/student step and one epoch of pretraining.

use super::corpus::Sample;
use super::ema::ema_update;
use super::{DistillError, EmaCadence, Result, RunConfig};
use crate::maskgen::{
    anatomask, mask_overlap_report, random_mask, unit_losses_from_slice, Mask, OverlapReport,
};
use crate::nnet::{
    init_params, masked_input, opt_step, recon_loss, reconstruct, Graph, OptState, ParamStore,
};
use crate::rng::{substream, Rng};
use crate::volume::{sample_augment, Augment};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const TRAIN_STREAM: u64 = 0x7_4a1e;

/// Mutable state of one pretraining run.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub teacher: ParamStore<f32>,
    pub student: ParamStore<f32>,
    pub opt: OptState,
    pub rng: Rng,
    /// Completed epochs; the next epoch uses `t = epoch`.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl DistillState {
    /// Student from the configured seed; the teacher starts as an exact copy.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let student = init_params(&cfg.net, cfg.seed)?;
        Ok(Self {
            teacher: student.clone(),
            student,
            opt: OptState::new(),
            rng: substream(cfg.seed, TRAIN_STREAM),
            epoch: 0,
            step: 0,
        })
    }
}

/// Everything needed to replay one final mask against the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLogEntry {
    pub epoch: u64,
    pub step: u64,
    pub sample: String,
    pub augment: Augment,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub r_t: f64,
    pub student_mse: Vec<f64>,
    pub teacher_mse: Vec<f64>,
    pub masks: Vec<MaskLogEntry>,
    pub overlap: Vec<OverlapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: u64,
    pub r_t: f64,
    pub student_masked_mse: f64,
    pub teacher_masked_mse: f64,
    pub overlap_fraction: f64,
    pub baseline_fraction: f64,
    pub seconds: f64,
    /// Per-class overlap averaged over the epoch's samples.
    #[serde(skip)]
    pub overlap: Option<OverlapReport>,
}

fn augment_for(cfg: &RunConfig, s: &Sample, rng: &mut Rng) -> Result<Augment> {
    if cfg.augment {
        Ok(sample_augment(s.image.dims(), cfg.patch, rng)?)
    } else {
        Ok(Augment {
            size: cfg.patch,
            ..Augment::identity(s.image.dims())
        })
    }
}

/// One optimizer step over `batch` (images already intensity-normalised).
///
/// Per sample: draw a random initial mask, run the teacher on it without
/// recording gradients, rank its per-unit losses into the final mask, and
/// accumulate the student's gradient on that mask. Then one optimizer step on
/// the batch-mean gradient, followed by the teacher EMA when enabled.
pub fn pretrain_step(
    state: &mut DistillState,
    cfg: &RunConfig,
    batch: &[&Sample],
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(DistillError::Config("empty batch".into()));
    }
    let r_t = cfg.effective_schedule().ratio(state.epoch)?;
    let grid = cfg.grid()?;
    let levels = cfg.net.scales;
    let mut out = StepMetrics {
        r_t,
        student_mse: Vec::with_capacity(batch.len()),
        teacher_mse: Vec::with_capacity(batch.len()),
        masks: Vec::with_capacity(batch.len()),
        overlap: Vec::with_capacity(batch.len()),
    };
    let mut grad_sum = state.student.zeros_like();
    for s in batch {
        let aug = augment_for(cfg, s, &mut state.rng)?;
        let v = aug.apply(&s.image)?;
        let labels = aug.apply_labels(&s.labels)?;

        let initial = random_mask(&grid, cfg.gamma, &mut state.rng)?;
        let (x, active) = masked_input::<f32>(&v, &initial, levels)?;
        let mut tg = Graph::inference();
        let recon = reconstruct(&mut tg, &cfg.net, &state.teacher, x, Some(&active))?;
        let losses = unit_losses_from_slice(tg.value(recon).data(), &v, &initial)?;
        drop(tg);
        out.teacher_mse.push(losses.mean());
        let fin = anatomask(
            &losses,
            &initial,
            cfg.gamma,
            r_t,
            cfg.strategy.significance,
            &mut state.rng,
        )?;

        let (x, active) = masked_input::<f32>(&v, &fin, levels)?;
        let mut sg = Graph::new();
        let recon = reconstruct(&mut sg, &cfg.net, &state.student, x, Some(&active))?;
        let loss = recon_loss(&mut sg, recon, &v, &fin)?;
        out.student_mse.push(sg.value(loss).data()[0] as f64);
        grad_sum.axpy(1.0, &sg.backward(loss, &state.student)?)?;

        out.overlap.push(mask_overlap_report(&fin, &labels)?);
        out.masks.push(MaskLogEntry {
            epoch: state.epoch + 1,
            step: state.step,
            sample: s.name.clone(),
            augment: aug,
            mask: fin,
        });
    }
    grad_sum.scale(1.0 / batch.len() as f32);
    opt_step(&cfg.optimizer_at(state.epoch), &mut state.opt, &mut state.student, &grad_sum)?;
    state.step += 1;
    if cfg.strategy.self_distillation && cfg.ema_cadence == EmaCadence::Step {
        ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
    }
    if !state.student.all_finite() {
        return Err(DistillError::Diverged { step: state.step });
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One pass over `samples` in a freshly shuffled order. `on_step` sees every
/// step's metrics before the next step starts.
pub fn run_epoch(
    state: &mut DistillState,
    cfg: &RunConfig,
    samples: &[Sample],
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<EpochMetrics> {
    if samples.is_empty() {
        return Err(DistillError::Corpus("no samples to train on".into()));
    }
    if state.epoch >= cfg.schedule.total_epochs {
        return Err(DistillError::Config(format!(
            "all {} epochs already completed",
            cfg.schedule.total_epochs
        )));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut state.rng);
    let (mut student, mut teacher, mut overlap) = (Vec::new(), Vec::new(), Vec::new());
    let mut r_t = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let m = pretrain_step(state, cfg, &batch)?;
        on_step(&m)?;
        r_t = m.r_t;
        student.extend(m.student_mse);
        teacher.extend(m.teacher_mse);
        overlap.extend(m.overlap);
    }
    if cfg.strategy.self_distillation && cfg.ema_cadence == EmaCadence::Epoch {
        ema_update(&mut state.teacher, &state.student, cfg.ema_decay)?;
    }
    state.epoch += 1;
    let overlap = OverlapReport::mean(&overlap).expect("non-empty epoch");
    Ok(EpochMetrics {
        epoch: state.epoch,
        r_t,
        student_masked_mse: mean(&student),
        teacher_masked_mse: mean(&teacher),
        overlap_fraction: overlap.aggregate.overlap_fraction,
        baseline_fraction: overlap.aggregate.baseline_fraction,
        seconds: start.elapsed().as_secs_f64(),
        overlap: Some(overlap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::budget;
    use crate::nnet::{DecoderVariant, NetConfig};
    use crate::volume::{gen_phantom, znorm, PhantomSpec};

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            net: NetConfig {
                scales: 1,
                channels: vec![2, 4],
                kernel: 3,
                decoder: DecoderVariant::Hierarchical,
                leaky_slope: 0.01,
            },
            patch: [8, 8, 8],
            mask_unit: [2, 2, 2],
            batch_size: 2,
            ..RunConfig::default()
        }
    }

    fn samples(n: usize, dims: [usize; 3]) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let p = gen_phantom(&PhantomSpec::default(), dims, [1.5; 3], &mut substream(3, i as u64))
                    .unwrap();
                Sample {
                    name: format!("s{i}"),
                    image: znorm(&p.image),
                    labels: p.labels,
                }
            })
            .collect()
    }

    #[test]
    fn teacher_starts_as_student() {
        let s = DistillState::init(&tiny_cfg()).unwrap();
        assert!(s.teacher.bit_equal(&s.student));
    }

    #[test]
    fn step_keeps_budget_and_updates_student_only() {
        let cfg = tiny_cfg();
        let data = samples(2, [10, 10, 10]);
        let mut st = DistillState::init(&cfg).unwrap();
        let before = st.clone();
        let refs: Vec<&Sample> = data.iter().collect();
        let m = pretrain_step(&mut st, &cfg, &refs).unwrap();
        let b = budget(cfg.gamma, cfg.grid().unwrap().n());
        assert!(m.masks.iter().all(|e| e.mask.len() == b));
        assert!(!st.student.bit_equal(&before.student));
        let mut expected = before.teacher.clone();
        ema_update(&mut expected, &st.student, cfg.ema_decay).unwrap();
        assert!(st.teacher.bit_equal(&expected));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn frozen_teacher_without_self_distillation() {
        let mut cfg = tiny_cfg();
        cfg.strategy.self_distillation = false;
        let data = samples(3, [8, 8, 8]);
        let mut st = DistillState::init(&cfg).unwrap();
        let init = st.teacher.clone();
        for _ in 0..2 {
            run_epoch(&mut st, &cfg, &data, |_| Ok(())).unwrap();
        }
        assert!(st.teacher.bit_equal(&init));
        assert!(!st.student.bit_equal(&init));
    }

    #[test]
    fn epoch_cadence_updates_once() {
        let mut cfg = tiny_cfg();
        cfg.ema_cadence = EmaCadence::Epoch;
        cfg.ema_decay = 0.5;
        let data = samples(2, [8, 8, 8]);
        let mut st = DistillState::init(&cfg).unwrap();
        let t0 = st.teacher.clone();
        let mut steps = 0;
        run_epoch(&mut st, &cfg, &data, |_| {
            steps += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(steps, 1);
        let mut expected = t0;
        ema_update(&mut expected, &st.student, 0.5).unwrap();
        assert!(st.teacher.bit_equal(&expected));
    }

    #[test]
    fn epochs_are_deterministic() {
        let cfg = tiny_cfg();
        let data = samples(3, [10, 10, 10]);
        let run = || {
            let mut st = DistillState::init(&cfg).unwrap();
            let a = run_epoch(&mut st, &cfg, &data, |_| Ok(())).unwrap();
            let b = run_epoch(&mut st, &cfg, &data, |_| Ok(())).unwrap();
            (a, b, st)
        };
        let (a1, b1, s1) = run();
        let (a2, b2, s2) = run();
        assert_eq!(a1.student_masked_mse.to_bits(), a2.student_masked_mse.to_bits());
        assert_eq!(b1.teacher_masked_mse.to_bits(), b2.teacher_masked_mse.to_bits());
        assert!(s1.student.bit_equal(&s2.student));
        assert!(s1.teacher.bit_equal(&s2.teacher));
        assert_eq!(a1.epoch, 1);
        assert_eq!(b1.epoch, 2);
    }

    #[test]
    fn refuses_to_run_past_schedule() {
        let mut cfg = tiny_cfg();
        cfg.schedule.total_epochs = 1;
        let data = samples(1, [8, 8, 8]);
        let mut st = DistillState::init(&cfg).unwrap();
        run_epoch(&mut st, &cfg, &data, |_| Ok(())).unwrap();
        assert!(run_epoch(&mut st, &cfg, &data, |_| Ok(())).is_err());
    }
}
