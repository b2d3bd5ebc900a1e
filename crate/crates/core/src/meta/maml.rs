//! MAML: backpropagate a test loss through `K` unrolled inner steps.

use crate::autodiff::{GradMap, Graph, ParamStore};
use crate::error::{invalid, Result};
use crate::objective::Objective;

use super::warp::MetaLoss;

/// Default cap on `K`; the whole unroll is held in memory.
pub const DEFAULT_UNROLL_LIMIT: usize = 10;

/// Train/test objectives of one task.
#[derive(Clone, Copy)]
pub struct MamlTask<'a> {
    pub train: &'a dyn Objective,
    pub test: &'a dyn Objective,
}

/// `C = Σ_τ L_test(θ_K^τ)` with `θ_{k+1} = θ_k − α∇L_train(θ_k)` from a shared θ0,
/// and its gradient over the `task_ids` slots of θ0.
///
/// Warp slots are read but not differentiated.
pub fn maml_objective(
    store: &ParamStore,
    task_ids: &[String],
    tasks: &[MamlTask<'_>],
    alpha: f64,
    k: usize,
    unroll_limit: usize,
) -> Result<MetaLoss> {
    if k > unroll_limit {
        return Err(invalid(format!("{k} inner steps exceed the unroll limit of {unroll_limit}")));
    }
    if !(alpha >= 0.0) {
        return Err(invalid(format!("learning rate must be non-negative, got {alpha}")));
    }
    let mut value = 0.0;
    let mut grad = GradMap::zeros_like(store, task_ids)?;
    for task in tasks {
        let g = Graph::new();
        let mut vars = store.bind(&g);
        let theta0 = vars.select(task_ids)?;
        for _ in 0..k {
            let current = vars.select(task_ids)?;
            let loss = task.train.loss(&g, &vars)?;
            let grads = g.grad(loss, &current)?;
            for ((id, t), gr) in task_ids.iter().zip(&current).zip(&grads) {
                vars.replace(id, t.sub(&gr.scale(alpha)?)?)?;
            }
        }
        let test = task.test.loss(&g, &vars)?;
        value += test.item();
        let gr = g.backward(test, &theta0)?;
        grad.accumulate(&GradMap::from_pairs(task_ids, gr), 1.0)?;
    }
    Ok(MetaLoss { value, grad })
}
