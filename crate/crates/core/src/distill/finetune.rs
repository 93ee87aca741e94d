//! Segmentation probe: the pretrained encoder/decoder trunk plus a fresh
//! 1x1x1 class head, trained densely with voxelwise cross-entropy.

use super::corpus::{Corpus, Sample};
use super::run::prepare_samples;
use super::{DistillError, FinetuneConfig, Result};
use crate::metrics::SegReport;
use crate::nnet::{
    add_seg_head, init_params, opt_step, segment, Graph, NetConfig, OptState, ParamStore, Tensor,
};
use crate::rng::substream;
use crate::volume::{sample_augment, LabelVolume, Volume};
use rand::seq::SliceRandom;
use std::sync::Arc;

const FINETUNE_STREAM: u64 = 0xf1_7e;

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    /// Held-out report before training (epoch 0) and after every epoch.
    pub history: Vec<(u64, SegReport)>,
    /// Mean training cross-entropy per epoch.
    pub train_loss: Vec<f64>,
}

impl FinetuneOutcome {
    pub fn report(&self) -> &SegReport {
        &self.history.last().expect("history starts at epoch 0").1
    }
}

/// Per-voxel argmax of the segmentation logits for an already normalised `v`.
pub fn predict(net: &NetConfig, params: &ParamStore<f32>, v: &Volume, classes: u16) -> Result<LabelVolume> {
    let mut g = Graph::inference();
    let logits = segment(&mut g, net, params, Tensor::from_volume(v))?;
    let l = g.value(logits);
    let c = l.channels();
    if c != classes as usize {
        return Err(DistillError::ClassMismatch {
            expected: classes,
            found: c as u16,
        });
    }
    let labels = l
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    Ok(LabelVolume::new(v.dims(), classes, labels)?)
}

fn evaluate(cfg: &FinetuneConfig, params: &ParamStore<f32>, held_out: &[Sample]) -> Result<SegReport> {
    let reports = held_out
        .iter()
        .map(|s| {
            let pred = predict(&cfg.net, params, &s.image, cfg.classes)?;
            Ok(SegReport::evaluate(&pred, &s.labels, cfg.tau)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegReport::mean(&reports).expect("held-out split is non-empty"))
}

/// Trains the probe on the leading part of `corpus` and reports on the
/// held-out tail. `pretrained = None` starts the trunk from random weights.
pub fn finetune_seg(
    pretrained: Option<&ParamStore<f32>>,
    corpus: &Corpus,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let found = corpus.classes();
    if found != cfg.classes {
        return Err(DistillError::ClassMismatch {
            expected: cfg.classes,
            found,
        });
    }
    let fresh = init_params(&cfg.net, cfg.seed)?;
    let mut params = match pretrained {
        Some(p) => {
            fresh.check_schema(p)?;
            p.clone()
        }
        None => fresh,
    };
    add_seg_head(&cfg.net, &mut params, cfg.classes as usize, cfg.seed);

    let samples = prepare_samples(corpus);
    let n = samples.len();
    let k = ((n as f64 * cfg.holdout).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return Err(DistillError::Corpus("need at least two samples to split".into()));
    }
    let (train, held_out) = samples.split_at(n - k);

    let mut rng = substream(cfg.seed, FINETUNE_STREAM);
    let mut opt = OptState::new();
    let mut history = vec![(0, evaluate(cfg, &params, held_out)?)];
    let mut train_loss = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad_sum = params.zeros_like();
            for &i in chunk {
                let s = &train[i];
                let (v, labels) = if cfg.augment {
                    let aug = sample_augment(s.image.dims(), s.image.dims(), &mut rng)?;
                    (aug.apply(&s.image)?, aug.apply_labels(&s.labels)?)
                } else {
                    (s.image.clone(), s.labels.clone())
                };
                let mut g = Graph::new();
                let logits = segment(&mut g, &cfg.net, &params, Tensor::from_volume(&v))?;
                let loss = g.softmax_ce(logits, Arc::new(labels.data().to_vec()))?;
                losses.push(g.value(loss).data()[0] as f64);
                grad_sum.axpy(1.0, &g.backward(loss, &params)?)?;
            }
            grad_sum.scale(1.0 / chunk.len() as f32);
            opt_step(&cfg.optimizer, &mut opt, &mut params, &grad_sum)?;
        }
        train_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
        history.push((epoch, evaluate(cfg, &params, held_out)?));
    }
    Ok(FinetuneOutcome {
        params,
        history,
        train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::corpus::load_corpus;
    use crate::distill::write_corpus;
    use crate::nnet::DecoderVariant;
    use crate::volume::PhantomSpec;

    fn tiny() -> NetConfig {
        NetConfig {
            scales: 1,
            channels: vec![4, 4],
            kernel: 3,
            decoder: DecoderVariant::Hierarchical,
            leaky_slope: 0.01,
        }
    }

    fn corpus(n: usize) -> (tempfile::TempDir, Corpus) {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &PhantomSpec::default(), n, [8, 8, 8], [1.5; 3]).unwrap();
        let c = load_corpus(dir.path()).unwrap();
        (dir, c)
    }

    #[test]
    fn zero_epochs_still_reports() {
        let (_d, c) = corpus(4);
        let mut cfg = FinetuneConfig::new(tiny(), 4);
        cfg.epochs = 0;
        let out = finetune_seg(None, &c, &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.report().per_class.len(), 3);
        assert!(out.train_loss.is_empty());
    }

    #[test]
    fn training_lowers_loss() {
        let (_d, c) = corpus(4);
        let mut cfg = FinetuneConfig::new(tiny(), 4);
        cfg.epochs = 6;
        cfg.optimizer = crate::nnet::Optimizer::AdamW {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let out = finetune_seg(None, &c, &cfg).unwrap();
        assert!(out.train_loss.last().unwrap() < out.train_loss.first().unwrap());
        assert_eq!(out.history.len(), 7);
    }

    #[test]
    fn class_and_schema_mismatch() {
        let (_d, c) = corpus(2);
        let cfg = FinetuneConfig::new(tiny(), 3);
        assert!(matches!(finetune_seg(None, &c, &cfg), Err(DistillError::ClassMismatch { .. })));
        let cfg = FinetuneConfig::new(tiny(), 4);
        let wrong = init_params(&NetConfig::default(), 0).unwrap();
        assert!(finetune_seg(Some(&wrong), &c, &cfg).is_err());
    }

    #[test]
    fn background_head_skips_absent_classes() {
        let (_d, c) = corpus(2);
        let mut cfg = FinetuneConfig::new(tiny(), 4);
        cfg.epochs = 0;
        let mut params = init_params(&cfg.net, 0).unwrap();
        add_seg_head(&cfg.net, &mut params, 4, 0);
        for (name, t) in params.iter_mut() {
            if name.starts_with("seg.") {
                t.data_mut().fill(0.0);
            }
        }
        params.get_mut(crate::nnet::SEG_BIAS).unwrap().data_mut()[0] = 10.0;
        let bg = LabelVolume::background([8, 8, 8], 4).unwrap();
        let v = Volume::filled([8, 8, 8], [1.5; 3], 0.0).unwrap();
        let pred = predict(&cfg.net, &params, &v, 4).unwrap();
        let r = SegReport::evaluate(&pred, &bg, 1.0).unwrap();
        assert!(r.per_class.iter().all(|s| s.dsc.is_none() && s.nsd.is_none()));
        assert_eq!(r.mean_dsc(), None);
        let _ = c;
    }
}
