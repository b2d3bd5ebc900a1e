//! Incremental multitask meta-objective for continual learning.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamVars, Tensor, Var};
use crate::error::{invalid, Result};
use crate::network::{Batch, WarpedNetwork};
use crate::objective::Objective;

/// Weight of sub-task `i`'s validation loss in the meta-loss at sub-task `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinualWeighting {
    /// `1 / (n (T − t + 1))` for every `i ≤ t`: scaled by the sub-tasks remaining.
    #[default]
    Remaining,
    /// `1 / t`, a plain average over the sub-tasks seen so far.
    Uniform,
    /// `1 / (n (T − i + 1))`: each sub-task's total weight over a sequence is exactly 1.
    Equalized,
}

/// Weight of term `i` at sub-task `t` for `n` steps per sub-task and `T` sub-tasks.
pub fn continual_weight(mode: ContinualWeighting, t: usize, i: usize, n: usize, total: usize) -> Result<f64> {
    if t == 0 || t > total || i == 0 || i > t || n == 0 {
        return Err(invalid(format!(
            "continual weight needs 1 ≤ i ≤ t ≤ T and n ≥ 1, got i={i} t={t} T={total} n={n}"
        )));
    }
    Ok(match mode {
        ContinualWeighting::Remaining => 1.0 / (n * (total - t + 1)) as f64,
        ContinualWeighting::Uniform => 1.0 / t as f64,
        ContinualWeighting::Equalized => 1.0 / (n * (total - i + 1)) as f64,
    })
}

/// `Σ_{i≤t} w_i · L_task(θ; D_val_i)` evaluated in a single forward pass.
///
/// The validation batches are stacked and each squared residual carries the
/// weight `w_i / (2|D_i|)` of its sub-task.
#[derive(Clone, Debug)]
pub struct ContinualMetaObjective<'n> {
    net: &'n WarpedNetwork,
    stacked: Batch,
    weights: Tensor,
}

impl<'n> ContinualMetaObjective<'n> {
    /// `validation[i − 1]` holds sub-task `i`'s batch; at least `t` are required.
    pub fn new(
        net: &'n WarpedNetwork,
        validation: &[Batch],
        t: usize,
        n: usize,
        total: usize,
        mode: ContinualWeighting,
    ) -> Result<Self> {
        if validation.len() < t {
            return Err(invalid(format!(
                "sub-task {t} needs {t} validation batches, got {}",
                validation.len()
            )));
        }
        let mut w = Vec::new();
        for (i, batch) in validation[..t].iter().enumerate() {
            if batch.is_empty() {
                return Err(invalid(format!("validation batch {} is empty", i + 1)));
            }
            let per = continual_weight(mode, t, i + 1, n, total)? / (2.0 * batch.len() as f64);
            w.extend(std::iter::repeat(per).take(batch.len() * batch.targets.cols()));
        }
        let inputs: Vec<&Tensor> = validation[..t].iter().map(|b| &b.inputs).collect();
        let targets: Vec<&Tensor> = validation[..t].iter().map(|b| &b.targets).collect();
        let stacked = Batch::new(Tensor::vstack(&inputs)?, Tensor::vstack(&targets)?)?;
        let weights = Tensor::new(stacked.targets.shape().to_vec(), w)?;
        Ok(Self { net, stacked, weights })
    }
}

impl Objective for ContinualMetaObjective<'_> {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> Result<Var<'g>> {
        let x = graph.constant(self.stacked.inputs.clone());
        let y = graph.constant(self.stacked.targets.clone());
        let w = graph.constant(self.weights.clone());
        let pred = self.net.forward(graph, params, x)?;
        pred.sub(&y)?.square()?.mul(&w)?.sum()
    }
}
