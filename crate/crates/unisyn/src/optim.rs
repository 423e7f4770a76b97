//! Gradient-descent optimizers operating through the `Parameterized` name
//! visitor, so state survives checkpointing keyed by parameter name.

use crate::error::{Error, Result};
use crate::nn::param::Parameterized;
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub kind: OptimizerKind,
    /// Step counter (Adam bias correction).
    pub t: u64,
    /// Per-parameter auxiliary tensors, keyed `<param>.<slot>`.
    state: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently accumulated in `model`.
    /// Gradients are left untouched; callers zero them per step.
    pub fn step<M: Parameterized<F>>(&mut self, model: &mut M, lr: f64) {
        self.t += 1;
        let t = self.t;
        let kind = self.kind;
        let state = &mut self.state;
        let lr = F::from_f64c(lr);
        model.visit_params("", &mut |name, p| match kind {
            OptimizerKind::Sgd { momentum } => {
                if momentum == 0.0 {
                    p.value.zip_mut_with(&p.grad, |v, &g| *v -= lr * g);
                } else {
                    let mu = F::from_f64c(momentum);
                    let vel = state
                        .entry(format!("{name}.vel"))
                        .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
                    vel.zip_mut_with(&p.grad, |v, &g| *v = mu * *v + g);
                    p.value.zip_mut_with(vel, |v, &vv| *v -= lr * vv);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (F::from_f64c(beta1), F::from_f64c(beta2));
                let eps = F::from_f64c(eps);
                let bc1 = F::from_f64c(1.0 - beta1.powi(t as i32));
                let bc2 = F::from_f64c(1.0 - beta2.powi(t as i32));
                let m = state
                    .entry(format!("{name}.m"))
                    .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
                m.zip_mut_with(&p.grad, |mv, &g| {
                    *mv = b1 * *mv + (F::one() - b1) * g;
                });
                let m = m.clone();
                let v = state
                    .entry(format!("{name}.v"))
                    .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
                v.zip_mut_with(&p.grad, |vv, &g| {
                    *vv = b2 * *vv + (F::one() - b2) * g * g;
                });
                for ((pv, &mv), &vv) in p.value.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        });
    }

    /// Auxiliary tensors for checkpointing.
    pub fn state_tensors(&self) -> &BTreeMap<String, ArrayD<F>> {
        &self.state
    }

    pub fn restore(kind: OptimizerKind, t: u64, state: BTreeMap<String, ArrayD<F>>) -> Self {
        Optimizer { kind, t, state }
    }
}
