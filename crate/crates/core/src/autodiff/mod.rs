//! Reverse-mode automatic differentiation over dense `f64` tensors, with
//! double backprop and a stop-gradient operator.

mod finite_diff;
mod graph;
mod params;
mod tensor;

pub use finite_diff::{finite_diff_gradient, grad_map_relative_error, relative_error};
pub use graph::{Graph, Var};
pub use params::{GradMap, ParamStore, ParamVars, Role, Slot};
pub use tensor::Tensor;

use crate::error::Result;

/// Raw gradients of `output` for the `ids` slots bound in `vars`.
pub fn gradients<'g>(
    graph: &'g Graph,
    output: Var<'g>,
    vars: &ParamVars<'g>,
    ids: &[String],
) -> Result<GradMap> {
    let wrt = vars.select(ids)?;
    let grads = graph.backward(output, &wrt)?;
    Ok(GradMap::from_pairs(ids, grads))
}
