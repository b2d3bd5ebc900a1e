//! Geometry of an explicit warp `γ = Ω(θ)`.
//!
//! Descending `L ∘ Ω` in θ-space moves θ by `Δθ = Jᵀ∇L(γ)`, which moves γ by
//! `Δγ = J·Δθ = G⁻¹∇L(γ)` with the push-forward metric `G⁻¹ = J·Jᵀ`. The two
//! updates agree to first order in the step size; the Taylor gap measures the
//! remainder.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use super::{build_layers, Activation, LayerSpec, WarpedNetwork};
use crate::autodiff::{Graph, ParamStore, ParamVars, Role, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::objective::{Objective, PointLoss};
use crate::tasks::rng::{split_rng, stream_id};

/// A map `Ω: ℝᵈ → ℝᵈ` made only of warp-layers, applied to a row vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitWarp {
    net: WarpedNetwork,
    params: ParamStore,
}

impl ExplicitWarp {
    /// Residual tanh/relu warp `θ + MLP(θ)`, identity at initialisation.
    pub fn residual(dim: usize, hidden: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let specs = [LayerSpec::residual_warp(dim, hidden, activation)];
        let (net, params) = build_layers(&specs, seed)?;
        Ok(Self { net, params })
    }

    /// Linear warp `γ = A·θ` (column convention).
    pub fn linear(a: &Tensor) -> Result<Self> {
        if a.shape().len() != 2 || a.rows() != a.cols() {
            return Err(invalid("a linear warp needs a square matrix"));
        }
        let (net, mut params) = build_layers(&[LayerSpec::linear_warp(a.rows())], 0)?;
        params.set("0.weight", a.transpose())?;
        Ok(Self { net, params })
    }

    /// Wraps an existing warp-only network.
    pub fn from_parts(net: WarpedNetwork, params: ParamStore) -> Result<Self> {
        if !net.partition().task_ids.is_empty() {
            return Err(invalid("an explicit warp may only contain warp-layers"));
        }
        if net.in_dim() != net.out_dim() {
            return Err(invalid("an explicit warp must map a space onto itself"));
        }
        net.partition().validate(&params)?;
        Ok(Self { net, params })
    }

    /// Redraws every weight and bias from `U(−scale, scale)`.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = split_rng(seed, stream_id(0xA2, 0, 0));
        let ids: Vec<String> = self.params.ids().map(str::to_string).collect();
        for id in ids {
            let t = self.params.get(&id).expect("own slot");
            let data = (0..t.numel()).map(|_| rng.gen_range(-scale..=scale)).collect();
            let fresh = Tensor::new(t.shape().to_vec(), data).expect("same shape");
            self.params.set(&id, fresh).expect("same shape");
        }
    }

    pub fn dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn network(&self) -> &WarpedNetwork {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn warp_ids(&self) -> &[String] {
        &self.net.partition().warp_ids
    }

    /// Records `Ω(point)` using the warp slots bound in `vars`.
    pub fn apply<'g>(&self, graph: &'g Graph, vars: &ParamVars<'g>, point: Var<'g>) -> Result<Var<'g>> {
        self.net.forward(graph, vars, point)
    }

    /// `Ω(θ)` on plain values.
    pub fn map(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.predict(&self.params, &Tensor::row(theta))?.into_data())
    }

    /// `J[i][j] = ∂γ_i/∂θ_j` at `theta`.
    pub fn jacobian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(theta)?;
        let g = Graph::new();
        let vars = self.params.bind(&g);
        let x = g.leaf(Tensor::row(theta));
        let gamma = self.apply(&g, &vars, x)?;
        let d = self.dim();
        let mut j = DMatrix::zeros(d, d);
        for i in 0..d {
            let row = g.backward_retained(gamma.index(i)?, &[x])?;
            for (c, v) in row[0].data().iter().enumerate() {
                j[(i, c)] = *v;
            }
        }
        Ok(j)
    }

    /// Inverse push-forward metric `G⁻¹ = J·Jᵀ` at `theta`.
    pub fn metric_inverse(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let j = self.jacobian(theta)?;
        Ok(&j * j.transpose())
    }

    /// Smallest eigenvalue of `J·Jᵀ`; zero (up to rounding) when Ω is degenerate at `theta`.
    pub fn min_metric_eigenvalue(&self, theta: &[f64]) -> Result<f64> {
        let m = self.metric_inverse(theta)?;
        Ok(SymmetricEigen::new(m).eigenvalues.min())
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "warp",
                lhs: vec![1, theta.len()],
                rhs: vec![1, self.dim()],
            });
        }
        Ok(())
    }
}

/// `L(Ω(θ))` as an [`Objective`] over a store holding `theta_id` and the warp slots.
pub struct WarpedPointObjective<'a> {
    pub warp: &'a ExplicitWarp,
    pub loss: &'a dyn PointLoss,
    pub theta_id: &'a str,
}

impl Objective for WarpedPointObjective<'_> {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> Result<Var<'g>> {
        let theta = params.get(self.theta_id)?;
        let gamma = self.warp.apply(graph, params, theta)?;
        self.loss.eval(graph, gamma)
    }
}

impl ExplicitWarp {
    /// Store with the point `theta` as task slot `theta_id` plus this warp's slots.
    pub fn joint_store(&self, theta_id: &str, theta: &[f64]) -> Result<ParamStore> {
        self.check_dim(theta)?;
        let mut store = ParamStore::new();
        store.insert(theta_id, Role::Task, Tensor::row(theta))?;
        for (id, slot) in self.params.iter() {
            store.insert(id, Role::Warp, slot.value.clone())?;
        }
        Ok(store)
    }
}

/// The two first-order steps of a warped update at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedSteps {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `∇_θ (L∘Ω)(θ) = Jᵀ∇L(γ)`.
    pub delta_theta: Vec<f64>,
    /// `J·Δθ = G⁻¹∇L(γ)`.
    pub delta_gamma: Vec<f64>,
}

fn point_value(loss: &dyn PointLoss, point: &[f64]) -> Result<f64> {
    let g = Graph::new();
    let x = g.constant(Tensor::row(point));
    Ok(loss.eval(&g, x)?.item())
}

fn point_gradient(loss: &dyn PointLoss, point: &[f64]) -> Result<Vec<f64>> {
    let g = Graph::new();
    let x = g.leaf(Tensor::row(point));
    let y = loss.eval(&g, x)?;
    Ok(g.backward(y, &[x])?.remove(0).into_data())
}

/// Computes `Δθ`, `Δγ` of a warped gradient step at `theta`.
pub fn warped_space_steps(warp: &ExplicitWarp, theta: &[f64], loss: &dyn PointLoss) -> Result<WarpedSteps> {
    let gamma = warp.map(theta)?;
    let grad_gamma = point_gradient(loss, &gamma)?;
    let j = warp.jacobian(theta)?;
    let dl = nalgebra::DVector::from_column_slice(&grad_gamma);
    let delta_theta = j.transpose() * &dl;
    let delta_gamma = &j * &delta_theta;
    Ok(WarpedSteps {
        theta: theta.to_vec(),
        gamma,
        delta_theta: delta_theta.iter().copied().collect(),
        delta_gamma: delta_gamma.iter().copied().collect(),
    })
}

impl WarpedSteps {
    /// `|(L∘Ω)(θ − αΔθ) − L(γ − αΔγ)|`.
    pub fn taylor_gap(&self, warp: &ExplicitWarp, loss: &dyn PointLoss, alpha: f64) -> Result<f64> {
        let theta: Vec<f64> = self
            .theta
            .iter()
            .zip(&self.delta_theta)
            .map(|(t, d)| t - alpha * d)
            .collect();
        let gamma: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.delta_gamma)
            .map(|(g, d)| g - alpha * d)
            .collect();
        let lhs = point_value(loss, &warp.map(&theta)?)?;
        let rhs = point_value(loss, &gamma)?;
        Ok((lhs - rhs).abs())
    }
}

/// Empirical decay order `mean_k log₂(gap(α_k) / gap(α_k / 2))` over `alphas`.
///
/// Terms whose gaps have fallen to rounding level are skipped; returns `None`
/// if no term is usable.
pub fn taylor_order(
    warp: &ExplicitWarp,
    loss: &dyn PointLoss,
    theta: &[f64],
    alphas: &[f64],
) -> Result<Option<f64>> {
    let steps = warped_space_steps(warp, theta, loss)?;
    let mut orders = Vec::new();
    for &alpha in alphas {
        let big = steps.taylor_gap(warp, loss, alpha)?;
        let small = steps.taylor_gap(warp, loss, alpha / 2.0)?;
        if big > 1e-13 && small > 1e-14 {
            orders.push((big / small).log2());
        }
    }
    if orders.is_empty() {
        return Ok(None);
    }
    Ok(Some(orders.iter().sum::<f64>() / orders.len() as f64))
}
