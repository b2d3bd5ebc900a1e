//! The warp meta-objective at one trajectory sample.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Graph, ParamStore};
use crate::error::{invalid, Result};
use crate::network::ParameterPartition;
use crate::objective::Objective;

/// How the meta-loss depends on φ through the inner update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaObjectiveKind {
    /// Differentiate through `θ − α∇L_task(θ; φ)` (second order).
    #[default]
    Full,
    /// Treat the updated parameters as a constant.
    Approx,
}

/// A scalar objective value with its gradient over one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLoss {
    pub value: f64,
    pub grad: GradMap,
}

/// Everything one trajectory point yields: the inner update and the meta-gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpStep {
    pub task_loss: f64,
    /// `∇_θ L_task(θ; φ)`, over task slots.
    pub task_grad: GradMap,
    /// `L_meta(θ − α∇L_task; φ)`.
    pub meta_loss: f64,
    /// Gradient of the meta-loss over warp slots.
    pub meta_grad: GradMap,
}

impl WarpStep {
    pub fn meta(&self) -> MetaLoss {
        MetaLoss {
            value: self.meta_loss,
            grad: self.meta_grad.clone(),
        }
    }
}

/// Evaluates the warp meta-objective at the parameters in `store`.
///
/// One graph yields both the inner gradient (used to advance θ) and the
/// meta-gradient over φ. The two kinds share every forward kernel, so their
/// loss values are bit-identical.
pub fn warp_step(
    store: &ParamStore,
    partition: &ParameterPartition,
    task: &dyn Objective,
    meta: &dyn Objective,
    alpha: f64,
    kind: MetaObjectiveKind,
) -> Result<WarpStep> {
    if !(alpha >= 0.0) {
        return Err(invalid(format!("learning rate must be non-negative, got {alpha}")));
    }
    let g = Graph::new();
    let mut vars = store.bind(&g);
    let theta = vars.select(&partition.task_ids)?;
    let l_task = task.loss(&g, &vars)?;
    let task_loss = l_task.item();

    let task_grad = match kind {
        MetaObjectiveKind::Full => {
            let grads = g.grad(l_task, &theta)?;
            let mut values = Vec::with_capacity(grads.len());
            for ((id, t), gr) in partition.task_ids.iter().zip(&theta).zip(&grads) {
                let updated = t.sub(&gr.scale(alpha)?)?;
                vars.replace(id, updated)?;
                values.push((*gr.value()).clone());
            }
            GradMap::from_pairs(&partition.task_ids, values)
        }
        MetaObjectiveKind::Approx => {
            let grads = g.backward_retained(l_task, &theta)?;
            for ((id, t), gr) in partition.task_ids.iter().zip(&theta).zip(&grads) {
                let step = g.constant(gr.clone()).scale(alpha)?;
                let updated = t.sub(&step)?.stop_gradient()?;
                vars.replace(id, updated)?;
            }
            GradMap::from_pairs(&partition.task_ids, grads)
        }
    };

    let l_meta = meta.loss(&g, &vars)?;
    let meta_loss = l_meta.item();
    let phi = vars.select(&partition.warp_ids)?;
    let meta_grad = GradMap::from_pairs(&partition.warp_ids, g.backward(l_meta, &phi)?);
    Ok(WarpStep {
        task_loss,
        task_grad,
        meta_loss,
        meta_grad,
    })
}

/// `L_meta(θ − α∇L_task(θ; φ); φ)` and its exact gradient over φ.
pub fn warp_meta_loss_full(
    store: &ParamStore,
    partition: &ParameterPartition,
    task: &dyn Objective,
    meta: &dyn Objective,
    alpha: f64,
) -> Result<MetaLoss> {
    Ok(warp_step(store, partition, task, meta, alpha, MetaObjectiveKind::Full)?.meta())
}

/// `L_meta(sg[θ − α∇L_task(θ; φ)]; φ)` and its gradient over φ.
pub fn warp_meta_loss_approx(
    store: &ParamStore,
    partition: &ParameterPartition,
    task: &dyn Objective,
    meta: &dyn Objective,
    alpha: f64,
) -> Result<MetaLoss> {
    Ok(warp_step(store, partition, task, meta, alpha, MetaObjectiveKind::Approx)?.meta())
}

/// Cosine similarity between two gradient maps (0 if either vanishes).
pub fn cosine(a: &GradMap, b: &GradMap) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_gradient, grad_map_relative_error, Role, Tensor, Var};
    use crate::autodiff::ParamVars;

    /// Task loss `½ φ θ²`, meta loss `½ (θ − 1)² + φ²/2`.
    struct TaskQ;
    struct MetaQ;

    impl Objective for TaskQ {
        fn loss<'g>(&self, _g: &'g Graph, p: &ParamVars<'g>) -> Result<Var<'g>> {
            p.get("theta")?.square()?.mul(&p.get("phi")?)?.scale(0.5)?.sum()
        }
    }

    impl Objective for MetaQ {
        fn loss<'g>(&self, _g: &'g Graph, p: &ParamVars<'g>) -> Result<Var<'g>> {
            let a = p.get("theta")?.add_scalar(-1.0)?.square()?.scale(0.5)?.sum()?;
            a.add(&p.get("phi")?.square()?.scale(0.5)?.sum()?)
        }
    }

    fn setup(theta: f64, phi: f64) -> (ParamStore, ParameterPartition) {
        let mut s = ParamStore::new();
        s.insert("theta", Role::Task, Tensor::scalar(theta)).unwrap();
        s.insert("phi", Role::Warp, Tensor::scalar(phi)).unwrap();
        let p = ParameterPartition {
            task_ids: vec!["theta".into()],
            warp_ids: vec!["phi".into()],
        };
        (s, p)
    }

    #[test]
    fn hand_derived_quadratic() {
        // θ' = θ(1 − αφ); dL/dφ = (θ' − 1)(−αθ) + φ
        let (theta, phi, alpha) = (2.0, 0.5, 0.1);
        let (s, p) = setup(theta, phi);
        let full = warp_meta_loss_full(&s, &p, &TaskQ, &MetaQ, alpha).unwrap();
        let tp = theta * (1.0 - alpha * phi);
        let expected = (tp - 1.0) * (-alpha * theta) + phi;
        assert!((full.grad.get("phi").unwrap().item() - expected).abs() < 1e-14);
        let approx = warp_meta_loss_approx(&s, &p, &TaskQ, &MetaQ, alpha).unwrap();
        assert_eq!(approx.grad.get("phi").unwrap().item(), phi);
        assert_eq!(full.value.to_bits(), approx.value.to_bits());

        let fd = finite_diff_gradient(
            |st: &ParamStore| Ok(warp_meta_loss_full(st, &p, &TaskQ, &MetaQ, alpha)?.value),
            &s,
            &p.warp_ids,
            1e-5,
        )
        .unwrap();
        assert!(grad_map_relative_error(&full.grad, &fd) <= 1e-6);
    }

    #[test]
    fn zero_step_collapses_both_kinds() {
        let (s, p) = setup(-1.3, 0.7);
        let a = warp_step(&s, &p, &TaskQ, &MetaQ, 0.0, MetaObjectiveKind::Full).unwrap();
        let b = warp_step(&s, &p, &TaskQ, &MetaQ, 0.0, MetaObjectiveKind::Approx).unwrap();
        assert_eq!(a, b);
        assert!(warp_step(&s, &p, &TaskQ, &MetaQ, -0.1, MetaObjectiveKind::Full).is_err());
    }

    #[test]
    fn cosine_of_parallel_maps() {
        let ids = vec!["x".to_string()];
        let a = GradMap::from_pairs(&ids, vec![Tensor::row(&[1.0, 2.0])]);
        let b = a.scaled(3.0);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&a, &GradMap::from_pairs(&ids, vec![Tensor::zeros(vec![1, 2])])), 0.0);
    }
}
