//! Scalar objectives over bound parameters.

use crate::autodiff::{Graph, ParamVars, Var};
use crate::error::Result;

/// A differentiable scalar function of the parameters bound in a graph.
///
/// Implementations carry their own data (a mini-batch, a loss surface), so the
/// same objective can be evaluated at different parameter bindings, e.g. at
/// `θ` and at the updated `θ − α∇L`.
pub trait Objective {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> Result<Var<'g>>;
}

impl<T: Objective + ?Sized> Objective for &T {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> Result<Var<'g>> {
        (**self).loss(graph, params)
    }
}

impl<T: Objective + ?Sized> Objective for Box<T> {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> Result<Var<'g>> {
        (**self).loss(graph, params)
    }
}

/// A differentiable scalar function of a single point (e.g. a loss surface
/// evaluated at `γ = Ω(θ)`).
pub trait PointLoss {
    fn eval<'g>(&self, graph: &'g Graph, point: Var<'g>) -> Result<Var<'g>>;
}
