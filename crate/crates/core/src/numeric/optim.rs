//! SGD and Adam over named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A parameter tensor paired with its gradient.
pub struct ParamGroup<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
}

impl<'a> ParamGroup<'a> {
    pub fn new(name: impl Into<String>, values: &'a mut [f64], grads: &'a [f64]) -> Self {
        Self {
            name: name.into(),
            values,
            grads,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer configuration plus per-tensor moment buffers.
///
/// Moments are allocated on the first step and are matched to parameter
/// groups by position, so callers must always pass groups in the same order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = kind {
            if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0 && eps > 0.0) {
                return Err(Error::Invalid(format!(
                    "adam needs beta1, beta2 in (0,1) and eps > 0, got {beta1}, {beta2}, {eps}"
                )));
            }
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam_default(), lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update to every group. Nothing is modified if any gradient
    /// is non-finite or any shape disagrees with the stored moments.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>]) -> Result<()> {
        for g in groups.iter() {
            if g.values.len() != g.grads.len() {
                return Err(Error::shape("optimizer gradient", g.values.len(), g.grads.len()));
            }
            if let Some(i) = g.grads.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}[{i}]", g.name)));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.kind {
            if self.first.is_empty() {
                self.first = groups.iter().map(|g| vec![0.0; g.values.len()]).collect();
                self.second = self.first.clone();
            }
            if self.first.len() != groups.len()
                || self.first.iter().zip(groups.iter()).any(|(m, g)| m.len() != g.values.len())
            {
                return Err(Error::Contract(
                    "parameter groups changed shape between optimizer steps".into(),
                ));
            }
            self.step += 1;
            let t = self.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for ((g, m), v) in groups.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                for i in 0..g.values.len() {
                    let grad = g.grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad * grad;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    g.values[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        } else {
            self.step += 1;
            for g in groups.iter_mut() {
                for (p, d) in g.values.iter_mut().zip(g.grads) {
                    *p -= self.lr * d;
                }
            }
        }
        Ok(())
    }
}
