//! Hierarchical sparse encoder with a hierarchical or simple decoder.
//!
//! Encoder: a stride-1 stem at full resolution, then one stride-2 convolution
//! per scale, each followed by a leaky ReLU. In masked mode every encoder
//! convolution is submanifold-sparse over the [`ActiveSiteMap`].
//!
//! Hierarchical decoder, from the coarsest scale down: fill inactive sites with
//! a learned per-channel vector, project channels with a 1x1x1 convolution,
//! upsample x2, add the filled encoder features of that scale, then a dense
//! convolution block. Simple decoder: fill the coarsest map, one convolution
//! block at that scale, upsample straight to full resolution, one more block.

use super::{ActiveSiteMap, Graph, NnError, NodeId, ParamStore, Real, Result, Tensor};
use crate::maskgen::Mask;
use crate::rng::substream;
use crate::volume::Volume;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub const SEG_WEIGHT: &str = "seg.w";
pub const SEG_BIAS: &str = "seg.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    #[default]
    Hierarchical,
    Simple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of downsampling stages `S`; features exist at scales `0..=S`.
    pub scales: usize,
    /// Channel width per scale, `S + 1` entries.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub decoder: DecoderVariant,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            channels: vec![8, 16, 32, 64],
            kernel: 3,
            decoder: DecoderVariant::Hierarchical,
            leaky_slope: 0.01,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.scales == 0 {
            return bad("at least one downsampling scale is required".into());
        }
        if self.channels.len() != self.scales + 1 {
            return bad(format!(
                "{} scales need {} channel widths, got {}",
                self.scales,
                self.scales + 1,
                self.channels.len()
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return Err(NnError::EvenKernel(self.kernel));
        }
        Ok(())
    }

    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1usize << self.scales;
        if dims.iter().any(|d| d % f != 0) {
            return Err(NnError::Indivisible { dims, factor: f });
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter; `fan_in == 0` marks
    /// zero-initialised tensors.
    pub fn schema(&self) -> Vec<(String, Vec<usize>, usize)> {
        let k = self.kernel;
        let c = &self.channels;
        let s_max = self.scales;
        let mut out = Vec::new();
        let mut conv = |name: String, k: usize, cin: usize, cout: usize| {
            let fan = k * k * k * cin;
            out.push((format!("{name}.w"), vec![k, k, k, cin, cout], fan));
            out.push((format!("{name}.b"), vec![cout], fan));
        };
        conv("enc.stem".into(), k, 1, c[0]);
        for s in 1..=s_max {
            conv(format!("enc.down{s}"), k, c[s - 1], c[s]);
        }
        match self.decoder {
            DecoderVariant::Hierarchical => {
                for s in 0..s_max {
                    conv(format!("dec.proj{s}"), 1, c[s + 1], c[s]);
                    conv(format!("dec.block{s}"), k, c[s], c[s]);
                }
            }
            DecoderVariant::Simple => {
                conv("dec.simple1".into(), k, c[s_max], c[0]);
                conv("dec.simple2".into(), k, c[0], c[0]);
            }
        }
        conv("head".into(), 1, c[0], 1);
        match self.decoder {
            DecoderVariant::Hierarchical => {
                for s in 0..=s_max {
                    out.push((format!("dec.fill{s}"), vec![c[s]], 0));
                }
            }
            DecoderVariant::Simple => out.push((format!("dec.fill{s_max}"), vec![c[s_max]], 0)),
        }
        out
    }
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = if fan_in == 0 {
        vec![0.0; n]
    } else {
        let a = (1.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-a..a) as f32).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("schema shapes are positive")
}

/// Weights uniform in `+-sqrt(1/fan_in)`, mask-fill vectors zero, drawn in
/// name order from a stream of `seed`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut schema = cfg.schema();
    schema.sort_by(|a, b| a.0.cmp(&b.0));
    let mut rng = substream(seed, 0x1417);
    Ok(schema
        .into_iter()
        .map(|(name, shape, fan)| {
            let t = uniform_init(&shape, fan, &mut rng);
            (name, t)
        })
        .collect())
}

/// Adds a fresh `classes`-way 1x1x1 segmentation head to `store`.
pub fn add_seg_head(cfg: &NetConfig, store: &mut ParamStore<f32>, classes: usize, seed: u64) {
    let c0 = cfg.channels[0];
    let mut rng = substream(seed, 0x5e9);
    store.insert(SEG_WEIGHT, uniform_init(&[1, 1, 1, c0, classes], c0, &mut rng));
    store.insert(SEG_BIAS, uniform_init(&[classes], c0, &mut rng));
}

fn conv_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: NodeId,
    stride: usize,
    sparse: Option<(Arc<super::Occupancy>, Arc<super::Occupancy>)>,
    act: Option<&NetConfig>,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.conv(x, w, Some(b), stride, sparse)?;
    match act {
        Some(cfg) => g.leaky_relu(y, cfg.leaky_slope),
        None => Ok(y),
    }
}

/// Multi-scale features `[f0, .., fS]` at resolutions `/1 .. /2^S`.
/// `active = None` runs the encoder densely.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    store: &ParamStore<T>,
    input: NodeId,
    active: Option<&ActiveSiteMap>,
) -> Result<Vec<NodeId>> {
    cfg.validate()?;
    let dims = g.value(input).spatial()?;
    cfg.check_input(dims)?;
    if let Some(a) = active {
        if a.levels() != cfg.scales || a.scale(0).dims() != dims {
            return Err(NnError::Shape(format!(
                "active map with {} levels over {:?} for input {:?}",
                a.levels(),
                a.scale(0).dims(),
                dims
            )));
        }
    }
    let pair = |a: usize, b: usize| active.map(|m| (m.shared(a), m.shared(b)));
    let act = Some(cfg);
    let mut feats = vec![conv_block(g, store, "enc.stem", input, 1, pair(0, 0), act)?];
    for s in 1..=cfg.scales {
        let prev = feats[s - 1];
        feats.push(conv_block(
            g,
            store,
            &format!("enc.down{s}"),
            prev,
            2,
            pair(s - 1, s),
            act,
        )?);
    }
    Ok(feats)
}

fn densify<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    feat: NodeId,
    s: usize,
    active: Option<&ActiveSiteMap>,
) -> Result<NodeId> {
    match active {
        Some(a) => {
            let fill = g.param(store, &format!("dec.fill{s}"))?;
            g.mask_fill(feat, fill, a.shared(s))
        }
        None => Ok(feat),
    }
}

/// Full-resolution decoder features with `channels[0]` channels.
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    store: &ParamStore<T>,
    feats: &[NodeId],
    active: Option<&ActiveSiteMap>,
) -> Result<NodeId> {
    if feats.len() != cfg.scales + 1 {
        return Err(NnError::Config(format!(
            "decoder expects {} feature maps, got {}",
            cfg.scales + 1,
            feats.len()
        )));
    }
    let act = Some(cfg);
    let top = cfg.scales;
    match cfg.decoder {
        DecoderVariant::Hierarchical => {
            let mut h = densify(g, store, feats[top], top, active)?;
            for s in (0..top).rev() {
                let proj = conv_block(g, store, &format!("dec.proj{s}"), h, 1, None, None)?;
                let up = g.upsample(proj, 2)?;
                let skip = densify(g, store, feats[s], s, active)?;
                let fused = g.add(up, skip)?;
                h = conv_block(g, store, &format!("dec.block{s}"), fused, 1, None, act)?;
            }
            Ok(h)
        }
        DecoderVariant::Simple => {
            let h = densify(g, store, feats[top], top, active)?;
            let h = conv_block(g, store, "dec.simple1", h, 1, None, act)?;
            let up = g.upsample(h, 1 << top)?;
            conv_block(g, store, "dec.simple2", up, 1, None, act)
        }
    }
}

/// Single-channel reconstruction of `input` (already zeroed where masked).
pub fn reconstruct<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    store: &ParamStore<T>,
    input: Tensor<T>,
    active: Option<&ActiveSiteMap>,
) -> Result<NodeId> {
    let x = g.input(input);
    let feats = encode(g, cfg, store, x, active)?;
    let h = decode(g, cfg, store, &feats, active)?;
    conv_block(g, store, "head", h, 1, None, None)
}

/// Dense per-voxel class logits through the encoder, decoder trunk and the
/// segmentation head.
pub fn segment<T: Real>(
    g: &mut Graph<T>,
    cfg: &NetConfig,
    store: &ParamStore<T>,
    input: Tensor<T>,
) -> Result<NodeId> {
    let x = g.input(input);
    let feats = encode(g, cfg, store, x, None)?;
    let h = decode(g, cfg, store, &feats, None)?;
    let w = g.param(store, SEG_WEIGHT)?;
    let b = g.param(store, SEG_BIAS)?;
    g.conv(h, w, Some(b), 1, None)
}

/// Network input for `v` under `mask`: masked voxels zeroed, plus the
/// per-scale occupancy induced by voxel visibility.
pub fn masked_input<T: Real>(
    v: &Volume,
    mask: &Mask,
    levels: usize,
) -> Result<(Tensor<T>, ActiveSiteMap)> {
    let visible = mask.visibility();
    if visible.len() != v.len() || mask.grid().volume_dims() != v.dims() {
        return Err(NnError::Shape(format!(
            "mask grid {:?} does not cover volume {:?}",
            mask.grid().volume_dims(),
            v.dims()
        )));
    }
    let mut t = Tensor::from_volume(v);
    for (x, &vis) in t.data_mut().iter_mut().zip(&visible) {
        if !vis {
            *x = T::zero();
        }
    }
    let map = ActiveSiteMap::from_visibility(v.dims(), visible, levels)?;
    Ok((t, map))
}

/// Mean squared error over masked voxels only.
pub fn recon_loss<T: Real>(
    g: &mut Graph<T>,
    recon: NodeId,
    target: &Volume,
    mask: &Mask,
) -> Result<NodeId> {
    if g.value(recon).spatial()? != target.dims() {
        return Err(NnError::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            g.value(recon).shape(),
            target.dims()
        )));
    }
    let flags = mask.voxel_flags();
    if flags.len() != target.len() {
        return Err(NnError::Shape("mask does not cover target".into()));
    }
    g.masked_mse(recon, Tensor::from_volume(target), Arc::new(flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{random_mask, PatchGrid};
    use crate::rng::seeded;

    fn small(decoder: DecoderVariant) -> NetConfig {
        NetConfig {
            scales: 1,
            channels: vec![2, 3],
            kernel: 3,
            decoder,
            leaky_slope: 0.01,
        }
    }

    fn noise(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = seeded(seed);
        Volume::from_fn(dims, [1.0; 3], |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let mut c = NetConfig::default();
        c.channels.pop();
        assert!(c.validate().is_err());
        c = NetConfig::default();
        c.kernel = 4;
        assert!(c.validate().is_err());
        assert!(NetConfig::default().check_input([48, 48, 48]).is_ok());
        assert!(NetConfig::default().check_input([48, 44, 48]).is_err());
    }

    #[test]
    fn feature_shapes() {
        let cfg = small(DecoderVariant::Hierarchical);
        let p = init_params(&cfg, 0).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_volume(&noise([4, 6, 8], 0)));
        let f = encode(&mut g, &cfg, &p, x, None).unwrap();
        assert_eq!(g.value(f[0]).shape(), &[8, 6, 4, 2]);
        assert_eq!(g.value(f[1]).shape(), &[4, 3, 2, 3]);
        let bad = g.input(Tensor::from_volume(&noise([4, 6, 7], 0)));
        assert!(encode(&mut g, &cfg, &p, bad, None).is_err());
    }

    #[test]
    fn output_shape_matches_input_for_both_decoders() {
        for variant in [DecoderVariant::Hierarchical, DecoderVariant::Simple] {
            let cfg = NetConfig {
                decoder: variant,
                ..NetConfig::default()
            };
            let p = init_params(&cfg, 1).unwrap();
            let v = noise([16, 8, 8], 1);
            let mut g = Graph::<f32>::new();
            let r = reconstruct(&mut g, &cfg, &p, Tensor::from_volume(&v), None).unwrap();
            assert_eq!(g.value(r).spatial().unwrap(), [16, 8, 8]);
            assert_eq!(g.value(r).channels(), 1);
        }
    }

    #[test]
    fn zero_weights_reconstruct_zero() {
        let cfg = small(DecoderVariant::Hierarchical);
        let p = init_params(&cfg, 2).unwrap().zeros_like();
        let v = noise([4, 4, 4], 2);
        let grid = PatchGrid::for_volume([4, 4, 4], [2, 2, 2]).unwrap();
        let m = random_mask(&grid, 0.5, &mut seeded(0)).unwrap();
        let (x, act) = masked_input::<f32>(&v, &m, 1).unwrap();
        let mut g = Graph::new();
        let r = reconstruct(&mut g, &cfg, &p, x, Some(&act)).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_visible_sparse_equals_dense() {
        let cfg = NetConfig::default();
        let p = init_params(&cfg, 3).unwrap();
        let v = noise([16, 16, 8], 3);
        let act = ActiveSiteMap::full(v.dims(), cfg.scales).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_volume(&v));
        let sparse = encode(&mut g, &cfg, &p, x, Some(&act)).unwrap();
        let dense = encode(&mut g, &cfg, &p, x, None).unwrap();
        for (a, b) in sparse.iter().zip(&dense) {
            assert!(g.value(*a).max_abs_diff(g.value(*b)) <= 1e-6);
        }
        let ra = decode(&mut g, &cfg, &p, &sparse, Some(&act)).unwrap();
        let rb = decode(&mut g, &cfg, &p, &dense, None).unwrap();
        assert!(g.value(ra).max_abs_diff(g.value(rb)) <= 1e-6);
    }

    #[test]
    fn fully_masked_encoder_is_zero() {
        let cfg = small(DecoderVariant::Hierarchical);
        let p = init_params(&cfg, 4).unwrap();
        let grid = PatchGrid::for_volume([4, 4, 4], [2, 2, 2]).unwrap();
        let m = random_mask(&grid, 1.0, &mut seeded(0)).unwrap();
        let (x, act) = masked_input::<f32>(&noise([4, 4, 4], 4), &m, 1).unwrap();
        let mut g = Graph::new();
        let xi = g.input(x);
        for f in encode(&mut g, &cfg, &p, xi, Some(&act)).unwrap() {
            assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn recon_loss_ignores_visible_voxels() {
        let v = noise([4, 4, 4], 5);
        let grid = PatchGrid::for_volume([4, 4, 4], [2, 2, 2]).unwrap();
        let m = random_mask(&grid, 0.5, &mut seeded(1)).unwrap();
        let flags = m.voxel_flags();
        let loss_of = |pred: Vec<f64>| {
            let mut g = Graph::<f64>::new();
            let r = g.input(Tensor::new(vec![4, 4, 4, 1], pred).unwrap());
            let l = recon_loss(&mut g, r, &v, &m).unwrap();
            g.value(l).data()[0]
        };
        let target: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        assert_eq!(loss_of(target.clone()), 0.0);
        let shifted: Vec<f64> = target
            .iter()
            .zip(&flags)
            .map(|(&t, &m)| if m { t + 1.5 } else { t - 100.0 })
            .collect();
        assert!((loss_of(shifted) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn one_small_step_decreases_masked_loss() {
        let v = noise([4, 4, 4], 11);
        let grid = PatchGrid::for_volume([4, 4, 4], [2, 2, 2]).unwrap();
        let m = random_mask(&grid, 0.5, &mut seeded(2)).unwrap();
        for decoder in [DecoderVariant::Hierarchical, DecoderVariant::Simple] {
            let cfg = small(decoder);
            let mut p = init_params(&cfg, 3).unwrap().cast::<f64>();
            let step = |p: &ParamStore<f64>| {
                let (x, act) = masked_input::<f64>(&v, &m, cfg.scales).unwrap();
                let mut g = Graph::new();
                let r = reconstruct(&mut g, &cfg, p, x, Some(&act)).unwrap();
                let l = recon_loss(&mut g, r, &v, &m).unwrap();
                (g.value(l).data()[0], g.backward(l, p).unwrap())
            };
            let (before, grads) = step(&p);
            p.axpy(-1e-3, &grads).unwrap();
            let (after, _) = step(&p);
            assert!(after < before, "{decoder:?}: {after} >= {before}");
        }
    }

    #[test]
    fn schema_is_stable_per_variant() {
        let h = init_params(&small(DecoderVariant::Hierarchical), 0).unwrap();
        let h2 = init_params(&small(DecoderVariant::Hierarchical), 9).unwrap();
        let s = init_params(&small(DecoderVariant::Simple), 0).unwrap();
        assert_eq!(h.fingerprint(), h2.fingerprint());
        assert_ne!(h.fingerprint(), s.fingerprint());
        assert!(!h.bit_equal(&h2));
        assert!(h.bit_equal(&init_params(&small(DecoderVariant::Hierarchical), 0).unwrap()));
    }
}
