//! Tape-based reverse-mode differentiation over a fixed operator set.

use super::conv::{conv3d_backward, conv3d_forward, Activity};
use super::{NnError, Occupancy, ParamStore, Real, Result, Tensor};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

type SparsePair = (Arc<Occupancy>, Arc<Occupancy>);

enum Op<T> {
    Leaf,
    Param(String),
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        occ: Option<SparsePair>,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Add(NodeId, NodeId),
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    MaskFill {
        x: NodeId,
        fill: NodeId,
        occ: Arc<Occupancy>,
    },
    MaskedMse {
        pred: NodeId,
        target: Tensor<T>,
        mask: Arc<Vec<bool>>,
        count: usize,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Arc<Vec<u16>>,
    },
    Opaque {
        name: String,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Records a forward pass. Built with [`Graph::inference`] it refuses to
/// differentiate, which is how teacher passes stay gradient-free.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(NnError::NonFinite(self.op_name(&op)));
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn op_name(&self, op: &Op<T>) -> String {
        match op {
            Op::Leaf => "input".into(),
            Op::Param(n) => format!("param {n}"),
            Op::Conv { .. } => "conv3d".into(),
            Op::Upsample { .. } => "upsample".into(),
            Op::Add(..) => "add".into(),
            Op::LeakyRelu { .. } => "leaky_relu".into(),
            Op::MaskFill { .. } => "mask_fill".into(),
            Op::MaskedMse { .. } => "masked_mse".into(),
            Op::SoftmaxCe { .. } => "softmax_cross_entropy".into(),
            Op::Opaque { name, .. } => name.clone(),
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
            .expect("inputs are validated by the caller")
    }

    /// Node for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push(Op::Param(name.to_string()), value, true)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Convolution; `sparse` carries the (input, output) occupancy.
    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        sparse: Option<SparsePair>,
    ) -> Result<NodeId> {
        let act = match &sparse {
            Some((i, o)) => Activity::Sparse {
                input: i.as_ref(),
                output: o.as_ref(),
            },
            None => Activity::Dense,
        };
        let value = conv3d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            act,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Op::Conv {
                x,
                w,
                b,
                stride,
                occ: sparse,
            },
            value,
            rg,
        )
    }

    /// Nearest-neighbour upsampling by an integer factor per axis.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let src = self.value(x);
        let [h, w, d] = src.spatial()?;
        let c = src.channels();
        let out_dims = [h * factor, w * factor, d * factor];
        let mut out = Tensor::spatial_zeros(out_dims, c);
        {
            let s = src.data();
            let o = out.data_mut();
            let mut j = 0;
            for z in 0..out_dims[2] {
                for y in 0..out_dims[1] {
                    let row = (z / factor * w + y / factor) * h;
                    for x in 0..out_dims[0] {
                        let i = row + x / factor;
                        o[j * c..(j + 1) * c].copy_from_slice(&s[i * c..(i + 1) * c]);
                        j += 1;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Op::Upsample { x, factor }, out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NnError::Shape(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let slope = T::of(slope);
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(Op::LeakyRelu { x, slope }, out, rg)
    }

    /// Keeps active sites and writes the per-channel `fill` vector at
    /// inactive ones.
    pub fn mask_fill(&mut self, x: NodeId, fill: NodeId, occ: Arc<Occupancy>) -> Result<NodeId> {
        let src = self.value(x);
        let fv = self.value(fill);
        let c = src.channels();
        if src.spatial()? != occ.dims() || fv.len() != c {
            return Err(NnError::Shape(format!(
                "mask_fill of {:?} with fill {:?} over {:?}",
                src.shape(),
                fv.shape(),
                occ.dims()
            )));
        }
        let mut out = src.clone();
        for (site, chunk) in out.data_mut().chunks_exact_mut(c).enumerate() {
            if !occ.is_active(site) {
                chunk.copy_from_slice(fv.data());
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        self.push(Op::MaskFill { x, fill, occ }, out, rg)
    }

    /// Mean of `(pred - target)^2` over sites flagged in `mask`.
    pub fn masked_mse(&mut self, pred: NodeId, target: Tensor<T>, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.channels() != 1 || mask.len() != p.len() {
            return Err(NnError::Shape(format!(
                "masked_mse of {:?} against {:?} with {} flags",
                p.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NnError::EmptyMask);
        }
        let mut sum = T::zero();
        for ((&a, &b), &m) in p.data().iter().zip(target.data()).zip(mask.iter()) {
            if m {
                let r = a - b;
                sum += r * r;
            }
        }
        let loss = Tensor::scalar(sum / T::of(count as f64));
        let rg = self.rg(pred);
        self.push(
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            },
            loss,
            rg,
        )
    }

    /// Mean voxelwise softmax cross-entropy of `logits` `[D, W, H, C]`.
    pub fn softmax_ce(&mut self, logits: NodeId, labels: Arc<Vec<u16>>) -> Result<NodeId> {
        let l = self.value(logits);
        let c = l.channels();
        if l.len() != labels.len() * c {
            return Err(NnError::Shape(format!(
                "logits {:?} vs {} labels",
                l.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&k| k as usize >= c) {
            return Err(NnError::Shape(format!("label {bad} with {c} classes")));
        }
        let mut sum = 0.0f64;
        for (row, &k) in l.data().chunks_exact(c).zip(labels.iter()) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - m).f64().exp()).sum();
            sum += z.ln() - (row[k as usize] - m).f64();
        }
        let loss = Tensor::scalar(T::of(sum / labels.len() as f64));
        let rg = self.rg(logits);
        self.push(Op::SoftmaxCe { logits, labels }, loss, rg)
    }

    /// A forward-only transformation. Differentiating through it is an error.
    pub fn opaque(
        &mut self,
        name: &str,
        x: NodeId,
        f: impl FnOnce(&Tensor<T>) -> Tensor<T>,
    ) -> Result<NodeId> {
        let out = f(self.value(x));
        let rg = self.rg(x);
        self.push(
            Op::Opaque {
                name: name.to_string(),
            },
            out,
            rg,
        )
    }

    /// Gradients of the scalar `loss` for every parameter in `store`.
    /// Parameters the loss does not depend on receive zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore<T>) -> Result<ParamStore<T>> {
        if !self.grad_enabled {
            return Err(NnError::GradDisabled);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);
        let mut out = store.zeros_like();

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    if let Some(slot) = out.get_mut(name) {
                        *slot = g;
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    occ,
                } => {
                    let act = match occ {
                        Some((a, o)) => Activity::Sparse {
                            input: a.as_ref(),
                            output: o.as_ref(),
                        },
                        None => Activity::Dense,
                    };
                    let cg = conv3d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        act,
                        self.rg(*x),
                    )?;
                    if let Some(gx) = cg.input {
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*w) {
                        acc(&mut grads, *w, cg.weight);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            acc(&mut grads, *b, cg.bias);
                        }
                    }
                }
                Op::Upsample { x, factor } => {
                    let src = self.value(*x);
                    let [h, w, _] = src.spatial()?;
                    let c = src.channels();
                    let [oh, ow, od] = g.spatial()?;
                    let mut gx = Tensor::zeros(src.shape());
                    let gd = gx.data_mut();
                    let mut j = 0;
                    for z in 0..od {
                        for y in 0..ow {
                            let row = (z / factor * w + y / factor) * h;
                            for xx in 0..oh {
                                let s = row + xx / factor;
                                for (a, &v) in gd[s * c..(s + 1) * c]
                                    .iter_mut()
                                    .zip(&g.data()[j * c..(j + 1) * c])
                                {
                                    *a += v;
                                }
                                j += 1;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= T::zero() {
                            *gv *= *slope;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::MaskFill { x, fill, occ } => {
                    let c = g.channels();
                    let mut gx = g;
                    let mut gf = Tensor::zeros(self.value(*fill).shape());
                    for (site, chunk) in gx.data_mut().chunks_exact_mut(c).enumerate() {
                        if !occ.is_active(site) {
                            for (f, v) in gf.data_mut().iter_mut().zip(chunk.iter_mut()) {
                                *f += *v;
                                *v = T::zero();
                            }
                        }
                    }
                    if self.rg(*x) {
                        acc(&mut grads, *x, gx);
                    }
                    if self.rg(*fill) {
                        acc(&mut grads, *fill, gf);
                    }
                }
                Op::MaskedMse {
                    pred,
                    target,
                    mask,
                    count,
                } => {
                    let scale = g.data()[0] * T::of(2.0) / T::of(*count as f64);
                    let p = self.value(*pred);
                    let mut gp = Tensor::zeros(p.shape());
                    for (((o, &a), &b), &m) in gp
                        .data_mut()
                        .iter_mut()
                        .zip(p.data())
                        .zip(target.data())
                        .zip(mask.iter())
                    {
                        if m {
                            *o = scale * (a - b);
                        }
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::SoftmaxCe { logits, labels } => {
                    let l = self.value(*logits);
                    let c = l.channels();
                    let scale = g.data()[0].f64() / labels.len() as f64;
                    let mut gl = Tensor::zeros(l.shape());
                    for ((out, row), &k) in gl
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(l.data().chunks_exact(c))
                        .zip(labels.iter())
                    {
                        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                        let e: Vec<f64> = row.iter().map(|&v| (v - m).f64().exp()).collect();
                        let z: f64 = e.iter().sum();
                        for (j, o) in out.iter_mut().enumerate() {
                            let onehot = if j == k as usize { 1.0 } else { 0.0 };
                            *o = T::of(scale * (e[j] / z - onehot));
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::Opaque { name, .. } => return Err(NnError::UnsupportedOp(name.clone())),
            }
        }
        Ok(out)
    }
}
