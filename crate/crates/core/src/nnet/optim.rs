//! First-order optimizers over a [`ParamStore`].

use super::{NnError, ParamStore, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    /// Heavy-ball momentum: `v = mu*v + g; p -= lr*v`.
    Momentum {
        lr: f64,
        momentum: f64,
    },
    /// Adam with decoupled weight decay.
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Momentum {
            lr: 1e-2,
            momentum: 0.9,
        }
    }
}

impl Optimizer {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::Sgd { lr } => lr.is_finite() && lr > 0.0,
            Optimizer::Momentum { lr, momentum } => {
                lr.is_finite() && lr > 0.0 && (0.0..1.0).contains(&momentum)
            }
            Optimizer::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr.is_finite()
                    && lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(NnError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Momentum { lr, .. } | Optimizer::AdamW { lr, .. } => lr,
        }
    }

    /// The same optimizer with its learning rate replaced.
    pub fn with_lr(&self, rate: f64) -> Self {
        let mut o = self.clone();
        match &mut o {
            Optimizer::Sgd { lr } | Optimizer::Momentum { lr, .. } | Optimizer::AdamW { lr, .. } => *lr = rate,
        }
        o
    }
}

/// Per-parameter optimizer buffers. Empty moments mean "not yet allocated".
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub step: u64,
    pub first: ParamStore<f32>,
    pub second: ParamStore<f32>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Buffers as named tensors for checkpointing, prefixed `m1.` / `m2.`.
    pub fn tensors(&self) -> impl Iterator<Item = (String, &super::Tensor<f32>)> {
        self.first
            .iter()
            .map(|(n, t)| (format!("m1.{n}"), t))
            .chain(self.second.iter().map(|(n, t)| (format!("m2.{n}"), t)))
    }

    pub fn from_tensors(
        step: u64,
        tensors: impl IntoIterator<Item = (String, super::Tensor<f32>)>,
    ) -> Result<Self> {
        let mut s = Self {
            step,
            ..Self::default()
        };
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix("m1.") {
                s.first.insert(n, t);
            } else if let Some(n) = name.strip_prefix("m2.") {
                s.second.insert(n, t);
            } else {
                return Err(NnError::UnknownParam(name));
            }
        }
        Ok(s)
    }
}

/// One update of `params` from `grads` in place.
pub fn opt_step(
    opt: &Optimizer,
    state: &mut OptState,
    params: &mut ParamStore<f32>,
    grads: &ParamStore<f32>,
) -> Result<()> {
    params.check_schema(grads)?;
    if !grads.all_finite() {
        return Err(NnError::NonFinite("gradient".into()));
    }
    state.step += 1;
    match *opt {
        Optimizer::Sgd { lr } => params.axpy(-lr as f32, grads)?,
        Optimizer::Momentum { lr, momentum } => {
            if state.first.is_empty() {
                state.first = params.zeros_like();
            }
            params.check_schema(&state.first)?;
            let mu = momentum as f32;
            let lr = lr as f32;
            for ((_, p), ((_, v), (_, g))) in params
                .iter_mut()
                .zip(state.first.iter_mut().zip(grads.iter()))
            {
                for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        Optimizer::AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            if state.first.is_empty() {
                state.first = params.zeros_like();
                state.second = params.zeros_like();
            }
            params.check_schema(&state.first)?;
            params.check_schema(&state.second)?;
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let decay = (1.0 - lr * weight_decay) as f32;
            let (b1, b2) = (beta1 as f32, beta2 as f32);
            let step = (lr / bc1) as f32;
            let bc2 = bc2 as f32;
            let eps = eps as f32;
            let moments = state.first.iter_mut().zip(state.second.iter_mut());
            for ((_, p), (((_, m), (_, v)), (_, g))) in
                params.iter_mut().zip(moments.zip(grads.iter()))
            {
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut().iter_mut().zip(v.data_mut()))
                    .zip(g.data());
                for ((p, (m, v)), &g) in it {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p *= decay;
                    *p -= step * *m / ((*v / bc2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
