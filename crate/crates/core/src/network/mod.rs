//! Task-learners with interleaved warp-layers.
//!
//! A [`WarpedNetwork`] is an ordered list of layers, each tagged as a task
//! layer (parameters θ, adapted per task) or a warp layer (parameters φ,
//! meta-learned). Because warp-layers sit on the backward path of every task
//! layer below them, the ordinary task gradient is already preconditioned by
//! their Jacobians.
//!
//! Warp-layers are initialised to the identity map: linear warps start at the
//! identity matrix and residual warp blocks start with a zero output layer.

mod geometry;
mod preconditioner;

pub use geometry::{taylor_order, warped_space_steps, ExplicitWarp, WarpedPointObjective, WarpedSteps};
pub use preconditioner::{explicit_preconditioner, preconditioned_gradient, PreconditionerBlock};

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GradMap, ParamStore, ParamVars, Role, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::objective::Objective;
use crate::tasks::rng::{split_rng, stream_id, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<'g>(self, x: &Var<'g>) -> Result<Var<'g>> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }

    pub(crate) fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    pub(crate) fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = self.eval(x);
                s * (1.0 - s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Affine map `x·W + b`. Warp-linear layers have no bias and a square `W`.
    Linear,
    Activation { activation: Activation },
    /// `x + MLP(x)`; the MLP applies `activation` after every hidden layer.
    Residual {
        hidden: Vec<usize>,
        activation: Activation,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub role: Role,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            role: Role::Task,
            in_dim,
            out_dim,
        }
    }

    /// Square linear warp `T`, identity at initialisation.
    pub fn linear_warp(dim: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            role: Role::Warp,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn activation(dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Activation { activation },
            role: Role::Task,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn residual_warp(dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Residual { hidden, activation },
            role: Role::Warp,
            in_dim: dim,
            out_dim: dim,
        }
    }

    fn slot_names(&self, index: usize) -> Vec<String> {
        match &self.kind {
            LayerKind::Linear if self.role == Role::Warp => vec![format!("{index}.weight")],
            LayerKind::Linear => vec![format!("{index}.weight"), format!("{index}.bias")],
            LayerKind::Activation { .. } => vec![],
            LayerKind::Residual { hidden, .. } => (0..=hidden.len())
                .flat_map(|j| [format!("{index}.fc{j}.weight"), format!("{index}.fc{j}.bias")])
                .collect(),
        }
    }
}

/// Disjoint split of a network's slots into task (θ) and warp (φ) sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterPartition {
    pub task_ids: Vec<String>,
    pub warp_ids: Vec<String>,
}

impl ParameterPartition {
    /// Checks disjointness, coverage of `store`, and role tags.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let task: BTreeSet<&str> = self.task_ids.iter().map(String::as_str).collect();
        let warp: BTreeSet<&str> = self.warp_ids.iter().map(String::as_str).collect();
        if let Some(shared) = task.intersection(&warp).next() {
            return Err(invalid(format!("slot `{shared}` is both task and warp")));
        }
        if task.len() + warp.len() != store.len() {
            return Err(invalid(format!(
                "partition covers {} slots but the store holds {}",
                task.len() + warp.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let role = store.role(id)?;
            let listed = match role {
                Role::Task => task.contains(id),
                Role::Warp => warp.contains(id),
            };
            if !listed {
                return Err(invalid(format!("slot `{id}` ({role:?}) is missing from the partition")));
            }
        }
        Ok(())
    }

    pub fn all_ids(&self) -> Vec<String> {
        self.task_ids.iter().chain(&self.warp_ids).cloned().collect()
    }
}

/// Mini-batch of inputs `[n, in_dim]` and targets `[n, out_dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.rows() != targets.rows() || inputs.shape().len() != 2 || targets.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: inputs.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        Ok(Self { inputs, targets })
    }

    /// Batch of scalar regression pairs.
    pub fn from_pairs(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Self::new(Tensor::column(xs), Tensor::column(ys))
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    spec: LayerSpec,
    slots: Vec<String>,
}

/// Layer sequence `ω(L) ∘ h(L) ∘ ⋯ ∘ ω(1) ∘ h(1)`; parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpedNetwork {
    layers: Vec<Layer>,
    partition: ParameterPartition,
}

/// Builds a network and initialises its parameters.
///
/// Task weights and biases are drawn from `U(−1/√in, 1/√in)`; warp-layers
/// are initialised to the identity map.
pub fn build_network(specs: &[LayerSpec], seed: u64) -> Result<(WarpedNetwork, ParamStore)> {
    if !specs.iter().any(|s| s.role == Role::Task) {
        return Err(invalid("a network needs at least one task layer"));
    }
    build_layers(specs, seed)
}

pub(crate) fn build_layers(specs: &[LayerSpec], seed: u64) -> Result<(WarpedNetwork, ParamStore)> {
    if specs.is_empty() {
        return Err(invalid("a network needs at least one layer"));
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::DimMismatch {
                index: i + 1,
                expected: pair[1].in_dim,
                found: pair[0].out_dim,
            });
        }
    }
    let mut rng = split_rng(seed, stream_id(0xA1, 0, 0));
    let mut store = ParamStore::new();
    let mut layers = Vec::with_capacity(specs.len());
    let mut partition = ParameterPartition::default();

    for (index, spec) in specs.iter().enumerate() {
        match &spec.kind {
            LayerKind::Activation { .. } if spec.in_dim != spec.out_dim => {
                return Err(Error::DimMismatch {
                    index,
                    expected: spec.in_dim,
                    found: spec.out_dim,
                })
            }
            LayerKind::Residual { .. } if spec.in_dim != spec.out_dim => {
                return Err(invalid(format!("residual layer {index} must be square")))
            }
            LayerKind::Linear if spec.role == Role::Warp && spec.in_dim != spec.out_dim => {
                return Err(invalid(format!("linear warp layer {index} must be square")))
            }
            LayerKind::Activation { .. } if spec.role == Role::Warp => {
                return Err(invalid(format!("activation layer {index} has no parameters to warp")))
            }
            _ => {}
        }
        let slots = spec.slot_names(index);
        let values = init_layer(spec, &mut rng);
        for (id, value) in slots.iter().zip(values) {
            store.insert(id.clone(), spec.role, value)?;
            match spec.role {
                Role::Task => partition.task_ids.push(id.clone()),
                Role::Warp => partition.warp_ids.push(id.clone()),
            }
        }
        layers.push(Layer {
            spec: spec.clone(),
            slots,
        });
    }
    let net = WarpedNetwork { layers, partition };
    net.partition.validate(&store)?;
    Ok((net, store))
}

fn uniform(rng: &mut StreamRng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_rows(rows, cols, data).expect("shape matches")
}

fn init_layer(spec: &LayerSpec, rng: &mut StreamRng) -> Vec<Tensor> {
    match (&spec.kind, spec.role) {
        (LayerKind::Activation { .. }, _) => vec![],
        (LayerKind::Linear, Role::Warp) => vec![Tensor::identity(spec.in_dim)],
        (LayerKind::Linear, Role::Task) => {
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            vec![
                uniform(rng, spec.in_dim, spec.out_dim, bound),
                uniform(rng, 1, spec.out_dim, bound),
            ]
        }
        (LayerKind::Residual { hidden, .. }, role) => {
            let dims: Vec<usize> = std::iter::once(spec.in_dim)
                .chain(hidden.iter().copied())
                .chain(std::iter::once(spec.out_dim))
                .collect();
            let last = dims.len() - 2;
            let mut out = Vec::new();
            for (j, pair) in dims.windows(2).enumerate() {
                if j == last && role == Role::Warp {
                    out.push(Tensor::zeros(vec![pair[0], pair[1]]));
                    out.push(Tensor::zeros(vec![1, pair[1]]));
                } else {
                    let bound = 1.0 / (pair[0] as f64).sqrt();
                    out.push(uniform(rng, pair[0], pair[1], bound));
                    out.push(uniform(rng, 1, pair[1], bound));
                }
            }
            out
        }
    }
}

/// `x·W + 1·b`, with the bias broadcast over rows by an outer product.
fn affine<'g>(x: &Var<'g>, w: &Var<'g>, b: Option<&Var<'g>>) -> Result<Var<'g>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => {
            let rows = x.shape()[0];
            let ones = x.graph().constant(Tensor::full(vec![rows, 1], 1.0));
            y.add(&ones.matmul(b)?)
        }
        None => Ok(y),
    }
}

impl WarpedNetwork {
    pub fn partition(&self) -> &ParameterPartition {
        &self.partition
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn has_warps(&self) -> bool {
        !self.partition.warp_ids.is_empty()
    }

    pub(crate) fn layer_slots(&self, index: usize) -> &[String] {
        &self.layers[index].slots
    }

    /// The same task-learner with every warp-layer removed.
    pub fn unwarped(&self) -> WarpedNetwork {
        let layers: Vec<Layer> = self
            .layers
            .iter()
            .filter(|l| l.spec.role == Role::Task)
            .cloned()
            .collect();
        WarpedNetwork {
            layers,
            partition: ParameterPartition {
                task_ids: self.partition.task_ids.clone(),
                warp_ids: vec![],
            },
        }
    }

    /// Records the forward pass of `x` (`[n, in_dim]`) on `graph`.
    pub fn forward<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape,
                rhs: vec![self.in_dim()],
            });
        }
        let _ = graph;
        let mut h = x;
        for layer in &self.layers {
            h = match &layer.spec.kind {
                LayerKind::Activation { activation } => activation.apply(&h)?,
                LayerKind::Linear => {
                    let w = params.get(&layer.slots[0])?;
                    let b = layer.slots.get(1).map(|id| params.get(id)).transpose()?;
                    affine(&h, &w, b.as_ref())?
                }
                LayerKind::Residual { activation, .. } => {
                    let n = layer.slots.len() / 2;
                    let mut z = h;
                    for j in 0..n {
                        let w = params.get(&layer.slots[2 * j])?;
                        let b = params.get(&layer.slots[2 * j + 1])?;
                        z = affine(&z, &w, Some(&b))?;
                        if j + 1 < n {
                            z = activation.apply(&z)?;
                        }
                    }
                    h.add(&z)?
                }
            };
        }
        Ok(h)
    }

    /// Forward pass on plain tensors.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars = store.bind(&g);
        let xv = g.constant(x.clone());
        let y = self.forward(&g, &vars, xv)?;
        let v = y.value();
        Ok((*v).clone())
    }

    /// Halved mean squared error `1/(2|D|) Σ (f(x) − y)²` on `graph`.
    pub fn task_loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>, batch: &Batch) -> Result<Var<'g>> {
        if batch.is_empty() {
            return Err(invalid("task loss needs a non-empty batch"));
        }
        let x = graph.constant(batch.inputs.clone());
        let y = graph.constant(batch.targets.clone());
        let pred = self.forward(graph, params, x)?;
        pred.sub(&y)?
            .square()?
            .sum()?
            .scale(1.0 / (2.0 * batch.len() as f64))
    }

    /// Loss value of `store` on `batch`.
    pub fn evaluate(&self, store: &ParamStore, batch: &Batch) -> Result<f64> {
        let g = Graph::new();
        let vars = store.bind(&g);
        Ok(self.task_loss(&g, &vars, batch)?.item())
    }

    /// Gradient of the task loss over the task slots only (warp-preconditioned).
    pub fn task_gradient(&self, store: &ParamStore, batch: &Batch) -> Result<GradMap> {
        let g = Graph::new();
        let vars = store.bind(&g);
        let loss = self.task_loss(&g, &vars, batch)?;
        crate::autodiff::gradients(&g, loss, &vars, &self.partition.task_ids)
    }

    /// One inner step `θ ← θ − α ∇L_task(θ; φ)`; warp slots are copied unchanged.
    pub fn inner_sgd_step(&self, store: &ParamStore, batch: &Batch, alpha: f64) -> Result<ParamStore> {
        if !(alpha >= 0.0) {
            return Err(invalid(format!("learning rate must be non-negative, got {alpha}")));
        }
        let grad = self.task_gradient(store, batch)?;
        let mut next = store.clone();
        next.add_scaled(&grad, -alpha)?;
        Ok(next)
    }

    /// [`Objective`] for the task loss on a fixed batch.
    pub fn batch_objective(&self, batch: Batch) -> BatchObjective<'_> {
        BatchObjective { net: self, batch }
    }
}

/// Task loss of a network on one batch.
#[derive(Clone, Debug)]
pub struct BatchObjective<'n> {
    pub net: &'n WarpedNetwork,
    pub batch: Batch,
}

impl Objective for BatchObjective<'_> {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> Result<Var<'g>> {
        self.net.task_loss(graph, params, &self.batch)
    }
}

/// Task layers `1→200→200→200→200→1` with ReLU, each non-linearity followed
/// by a residual warp block `200→100→200` with tanh.
pub fn continual_sine_architecture() -> Vec<LayerSpec> {
    let width = 200;
    let mut specs = vec![LayerSpec::linear(1, width)];
    for i in 0..4 {
        specs.push(LayerSpec::activation(width, Activation::Relu));
        specs.push(LayerSpec::residual_warp(width, vec![100], Activation::Tanh));
        if i < 3 {
            specs.push(LayerSpec::linear(width, width));
        }
    }
    specs.push(LayerSpec::linear(width, 1));
    specs
}

/// Generic feed-forward regression net `in → hidden… → out` with an optional
/// warp after every hidden non-linearity.
pub fn mlp_architecture(
    in_dim: usize,
    hidden: &[usize],
    out_dim: usize,
    activation: Activation,
    warp: Option<&WarpKind>,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = in_dim;
    for &h in hidden {
        specs.push(LayerSpec::linear(prev, h));
        specs.push(LayerSpec::activation(h, activation));
        match warp {
            Some(WarpKind::Linear) => specs.push(LayerSpec::linear_warp(h)),
            Some(WarpKind::Residual { hidden, activation }) => {
                specs.push(LayerSpec::residual_warp(h, hidden.clone(), *activation))
            }
            None => {}
        }
        prev = h;
    }
    specs.push(LayerSpec::linear(prev, out_dim));
    specs
}

/// Warp-layer family used by [`mlp_architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WarpKind {
    Linear,
    Residual {
        hidden: Vec<usize>,
        activation: Activation,
    },
}
