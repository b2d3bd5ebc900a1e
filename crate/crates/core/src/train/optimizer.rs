//! Outer-loop optimisers for warp parameters and the initialisation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

/// Outer update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum OuterOptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OuterOptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

impl OuterOptimizerKind {
    /// Adam with decays (0.9, 0.999) and ε = 1e-8.
    pub fn adam() -> Self {
        Self::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(invalid(format!(
                    "Adam needs decays in [0, 1) and a positive epsilon, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }
}

/// Moment accumulators and step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OuterOptimizerState {
    pub m: GradMap,
    pub v: GradMap,
    pub step: u64,
}

/// An optimiser bound to a learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterOptimizer {
    pub kind: OuterOptimizerKind,
    pub lr: f64,
    pub state: OuterOptimizerState,
}

impl OuterOptimizer {
    pub fn new(kind: OuterOptimizerKind, lr: f64) -> Result<Self> {
        kind.validate()?;
        if !(lr >= 0.0) {
            return Err(invalid(format!("learning rate must be non-negative, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            state: OuterOptimizerState::default(),
        })
    }

    /// Applies one descent step for the slots present in `grad`.
    pub fn step(&mut self, params: &mut ParamStore, grad: &GradMap) -> Result<()> {
        if !grad.is_finite() {
            return Err(invalid("outer optimiser received a non-finite gradient"));
        }
        for (id, g) in grad.iter() {
            let p = params.get(id)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "outer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.state.step += 1;
        match self.kind {
            OuterOptimizerKind::Sgd => params.add_scaled(grad, -self.lr),
            OuterOptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.state.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (id, g) in grad.iter() {
                    let zeros = || Tensor::zeros(g.shape().to_vec());
                    let mut m = self.state.m.get(id).cloned().unwrap_or_else(zeros);
                    let mut v = self.state.v.get(id).cloned().unwrap_or_else(zeros);
                    let mut p = params.get(id)?.clone();
                    for (((pi, mi), vi), gi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                    params.set(id, p)?;
                    self.state.m.insert(id, m);
                    self.state.v.insert(id, v);
                }
                Ok(())
            }
        }
    }
}
