//! Meta-objectives and their gradients.
//!
//! The warp objective is evaluated per trajectory sample, either exactly
//! (through the inner update) or with the inner update held constant. Priors
//! over the initialisation (MAML, Leap) produce gradients for θ0, and the
//! joint objective combines both.

mod continual;
mod leap;
mod maml;
mod warp;

pub use continual::{continual_weight, ContinualMetaObjective, ContinualWeighting};
pub use leap::{leap_meta_gradient, leap_objective, ExtendedPoint, LeapAccumulator};
pub use maml::{maml_objective, MamlTask, DEFAULT_UNROLL_LIMIT};
pub use warp::{cosine, warp_meta_loss_approx, warp_meta_loss_full, warp_step, MetaLoss, MetaObjectiveKind, WarpStep};

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore};
use crate::error::{invalid, Result};
use crate::objective::Objective;

/// A task-parameter iterate drawn from an adaptation trajectory, with the data
/// needed to evaluate the meta-objective at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample<D> {
    pub task_id: usize,
    pub step: usize,
    /// Task-slot values `θ_k`.
    pub theta: GradMap,
    /// Inner optimiser momentum at `k`, when the inner loop uses momentum.
    pub momentum: Option<GradMap>,
    pub data: D,
}

impl<D> TrajectorySample<D> {
    /// `base` with the task slots replaced by this sample's `θ_k`.
    pub fn params(&self, base: &ParamStore) -> Result<ParamStore> {
        let mut out = base.clone();
        for (id, t) in self.theta.iter() {
            out.set(id, t.clone())?;
        }
        Ok(out)
    }
}

/// Task and meta objectives attached to a trajectory sample.
pub trait SampleObjectives {
    fn task(&self) -> &dyn Objective;
    fn meta(&self) -> &dyn Objective;
}

/// Meta-gradient accumulators `g_φ` and `g_θ0`.
///
/// Contributions are summed; [`MetaGradient::average`] divides each by its
/// own count exactly once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaGradient {
    pub g_phi: GradMap,
    pub g_theta0: GradMap,
    pub phi_count: usize,
    pub theta0_count: usize,
}

impl MetaGradient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_phi(&mut self, g: &GradMap) -> Result<()> {
        self.g_phi.accumulate(g, 1.0)?;
        self.phi_count += 1;
        Ok(())
    }

    pub fn add_theta0(&mut self, g: &GradMap) -> Result<()> {
        self.g_theta0.accumulate(g, 1.0)?;
        self.theta0_count += 1;
        Ok(())
    }

    /// Merges another accumulator (used for ordered reduction across tasks).
    pub fn merge(&mut self, other: &MetaGradient) -> Result<()> {
        self.g_phi.accumulate(&other.g_phi, 1.0)?;
        self.g_theta0.accumulate(&other.g_theta0, 1.0)?;
        self.phi_count += other.phi_count;
        self.theta0_count += other.theta0_count;
        Ok(())
    }

    /// `(g_φ / count_φ, g_θ0 / count_θ0)`; empty accumulators stay empty.
    pub fn average(&self) -> (GradMap, GradMap) {
        let avg = |g: &GradMap, c: usize| if c == 0 { g.clone() } else { g.scaled(1.0 / c as f64) };
        (avg(&self.g_phi, self.phi_count), avg(&self.g_theta0, self.theta0_count))
    }

    pub fn reset_phi(&mut self) {
        self.g_phi = GradMap::new();
        self.phi_count = 0;
    }

    pub fn reset_theta0(&mut self) {
        self.g_theta0 = GradMap::new();
        self.theta0_count = 0;
    }
}

/// `J = L(φ) + λ·C(θ0)` with its two gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGradient {
    pub value: f64,
    /// From `L` only.
    pub g_phi: GradMap,
    /// `λ·∇C`.
    pub g_theta0: GradMap,
}

pub fn joint_objective(l: &MetaLoss, c: &MetaLoss, lambda: f64) -> Result<JointGradient> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(JointGradient {
        value: l.value + lambda * c.value,
        g_phi: l.grad.clone(),
        g_theta0: c.grad.scaled(lambda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn gm(id: &str, v: f64) -> GradMap {
        GradMap::from_pairs(&[id.to_string()], vec![Tensor::scalar(v)])
    }

    #[test]
    fn joint_scales_only_the_prior() {
        let l = MetaLoss { value: 2.0, grad: gm("phi", 1.5) };
        let c = MetaLoss { value: 3.0, grad: gm("theta", -2.0) };
        let j = joint_objective(&l, &c, 1.0).unwrap();
        assert_eq!(j.g_theta0, c.grad);
        assert_eq!(j.value, 5.0);
        let j0 = joint_objective(&l, &c, 0.0).unwrap();
        assert_eq!(j0.g_phi, l.grad);
        assert!(j0.g_theta0.flatten().iter().all(|v| *v == 0.0));
        assert!(joint_objective(&l, &c, -1.0).is_err());
    }

    #[test]
    fn averaging_divides_once() {
        let mut m = MetaGradient::new();
        m.add_phi(&gm("phi", 1.0)).unwrap();
        m.add_phi(&gm("phi", 3.0)).unwrap();
        let (p, t) = m.average();
        assert_eq!(p.get("phi").unwrap().item(), 2.0);
        assert!(t.is_empty());
        assert_eq!(m.phi_count, 2);
        m.reset_phi();
        assert_eq!(m, MetaGradient::new());
    }
}
