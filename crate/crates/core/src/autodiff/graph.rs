//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. Nodes only
//! reference earlier nodes, so the node list is always in topological order.
//! [`Graph::backward`] computes plain gradient tensors; [`Graph::grad`]
//! records the backward pass itself as new nodes, so its results can be
//! differentiated again (double backprop).

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

static GENERATION: AtomicU64 = AtomicU64::new(1);

pub(crate) type NodeId = usize;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Expand(NodeId, Vec<usize>),
    Index(NodeId, usize),
    Scatter(NodeId, usize, Vec<usize>),
    StopGradient(NodeId),
}

impl Op {
    fn inputs(&self) -> [Option<NodeId>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul { a, b, .. } => [Some(a), Some(b)],
            Tanh(x) | Relu(x) | Sigmoid(x) | Sin(x) | Cos(x) | Exp(x) | Square(x) | Sum(x)
            | Mean(x) | Scale(x, _) | AddConst(x, _) | Expand(x, _) | Index(x, _)
            | Scatter(x, _, _) => [Some(x), None],
            // gradient never crosses a stop-gradient node
            StopGradient(_) => [None, None],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
}

/// Append-only tape of operations.
///
/// A graph is confined to one thread. Build a fresh graph per evaluation;
/// detached [`Tensor`] values may be shared freely.
pub struct Graph {
    generation: u64,
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph")
            .field("generation", &self.generation)
            .field("nodes", &self.len())
            .finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            generation: GENERATION.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Monotone identifier distinguishing graphs created by this process.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Op::Leaf, Rc::new(value));
        Var { graph: self, id }
    }

    /// Data that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(Op::Constant, Rc::new(value));
        Var { graph: self, id }
    }

    fn push(&self, op: Op, value: Rc<Tensor>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        nodes.len() - 1
    }

    fn value_of(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Evaluates `op` on already-recorded inputs and appends the result.
    fn apply(&self, op: Op) -> Result<NodeId> {
        if let Op::StopGradient(x) = op {
            let value = self.value_of(x);
            return Ok(self.push(op, value));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let v = |id: NodeId| &*nodes[id].value;
            match &op {
                Op::Leaf | Op::Constant => unreachable!("leaves are created directly"),
                Op::Add(a, b) => tensor::zip("add", v(*a), v(*b), |x, y| x + y)?,
                Op::Sub(a, b) => tensor::zip("sub", v(*a), v(*b), |x, y| x - y)?,
                Op::Mul(a, b) => tensor::zip("mul", v(*a), v(*b), |x, y| x * y)?,
                Op::MatMul { a, b, ta, tb } => tensor::matmul(v(*a), v(*b), *ta, *tb)?,
                Op::Tanh(x) => tensor::map("tanh", v(*x), f64::tanh)?,
                Op::Relu(x) => tensor::map("relu", v(*x), |t| t.max(0.0))?,
                Op::Sigmoid(x) => tensor::map("sigmoid", v(*x), tensor::sigmoid)?,
                Op::Sin(x) => tensor::map("sin", v(*x), f64::sin)?,
                Op::Cos(x) => tensor::map("cos", v(*x), f64::cos)?,
                Op::Exp(x) => tensor::map("exp", v(*x), f64::exp)?,
                Op::Square(x) => tensor::map("square", v(*x), |t| t * t)?,
                Op::Sum(x) => tensor::sum(v(*x))?,
                Op::Mean(x) => {
                    let n = v(*x).numel().max(1) as f64;
                    tensor::map("mean", &tensor::sum(v(*x))?, |s| s / n)?
                }
                Op::Scale(x, c) => tensor::map("scale", v(*x), |t| t * c)?,
                Op::AddConst(x, c) => tensor::map("add_scalar", v(*x), |t| t + c)?,
                Op::Expand(x, shape) => tensor::expand(v(*x), shape)?,
                Op::Index(x, i) => tensor::index(v(*x), *i)?,
                Op::Scatter(x, i, shape) => tensor::scatter(v(*x), *i, shape)?,
                Op::StopGradient(_) => unreachable!("handled above"),
            }
        };
        Ok(self.push(op, Rc::new(value)))
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(v.graph, self) {
            Ok(())
        } else {
            Err(Error::ForeignVariable)
        }
    }

    /// Gradients of the scalar `output` with respect to `wrt`, as plain tensors.
    ///
    /// Consumes the graph: a later `backward` or [`Graph::grad`] call fails with
    /// [`Error::GraphConsumed`]. Use [`Graph::backward_retained`] to keep it.
    pub fn backward(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let grads = self.backward_retained(output, wrt)?;
        self.consumed.set(true);
        Ok(grads)
    }

    /// Like [`Graph::backward`] but leaves the graph usable.
    pub fn backward_retained(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let backend = Raw { graph: self };
        let grads = self.run_backward(&backend, output, wrt)?;
        Ok(grads
            .into_iter()
            .map(|g| Rc::try_unwrap(g).unwrap_or_else(|rc| (*rc).clone()))
            .collect())
    }

    /// Gradients recorded as graph nodes, differentiable a second time.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        let backend = Recorded { graph: self };
        let ids = self.run_backward(&backend, output, wrt)?;
        Ok(ids.into_iter().map(|id| Var { graph: self, id }).collect())
    }

    fn run_backward<B: Backend>(
        &self,
        backend: &B,
        output: Var<'_>,
        wrt: &[Var<'_>],
    ) -> Result<Vec<B::V>> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        self.check(&output)?;
        for w in wrt {
            self.check(w)?;
        }
        let out_shape = self.shape_of(output.id);
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }

        let n = output.id + 1;
        let ops: Vec<Op> = self.nodes.borrow()[..n].iter().map(|nd| nd.op.clone()).collect();

        // nodes on some path from a requested input
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        for id in 0..n {
            if !relevant[id] {
                relevant[id] = ops[id].inputs().iter().flatten().any(|&i| relevant[i]);
            }
        }

        let mut grads: Vec<Option<B::V>> = vec![None; n];
        if relevant[output.id] {
            grads[output.id] = Some(backend.constant(Tensor::full(out_shape, 1.0)));
        }

        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            // keep the final gradient of requested inputs
            if wrt.iter().any(|w| w.id == id) {
                grads[id] = Some(g.clone());
            }
            self.propagate(backend, id, &ops[id], &g, &relevant, &mut grads)?;
        }

        wrt.iter()
            .map(|w| match grads.get(w.id).and_then(|g| g.clone()) {
                Some(g) => Ok(g),
                None => Ok(backend.constant(Tensor::zeros(self.shape_of(w.id)))),
            })
            .collect()
    }

    fn propagate<B: Backend>(
        &self,
        be: &B,
        id: NodeId,
        op: &Op,
        g: &B::V,
        relevant: &[bool],
        grads: &mut [Option<B::V>],
    ) -> Result<()> {
        let mut send = |target: NodeId, contribution: B::V| -> Result<()> {
            grads[target] = Some(match grads[target].take() {
                Some(acc) => be.add(&acc, &contribution)?,
                None => contribution,
            });
            Ok(())
        };
        let shape = |i: NodeId| self.shape_of(i);

        match *op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => {}
            Op::Add(a, b) => {
                if relevant[a] {
                    send(a, be.reduce_to(g, &shape(a))?)?;
                }
                if relevant[b] {
                    send(b, be.reduce_to(g, &shape(b))?)?;
                }
            }
            Op::Sub(a, b) => {
                if relevant[a] {
                    send(a, be.reduce_to(g, &shape(a))?)?;
                }
                if relevant[b] {
                    let neg = be.scale(g, -1.0)?;
                    send(b, be.reduce_to(&neg, &shape(b))?)?;
                }
            }
            Op::Mul(a, b) => {
                if relevant[a] {
                    let t = be.mul(g, &be.node(b))?;
                    send(a, be.reduce_to(&t, &shape(a))?)?;
                }
                if relevant[b] {
                    let t = be.mul(g, &be.node(a))?;
                    send(b, be.reduce_to(&t, &shape(b))?)?;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                // C = op(A)·op(B)
                if relevant[a] {
                    let ga = if ta {
                        be.matmul(&be.node(b), g, tb, true)?
                    } else {
                        be.matmul(g, &be.node(b), false, !tb)?
                    };
                    send(a, ga)?;
                }
                if relevant[b] {
                    let gb = if tb {
                        be.matmul(g, &be.node(a), true, ta)?
                    } else {
                        be.matmul(&be.node(a), g, !ta, false)?
                    };
                    send(b, gb)?;
                }
            }
            Op::Tanh(x) => {
                if relevant[x] {
                    let y = be.node(id);
                    let d = be.add_const(&be.scale(&be.square(&y)?, -1.0)?, 1.0)?;
                    send(x, be.mul(g, &d)?)?;
                }
            }
            Op::Sigmoid(x) => {
                if relevant[x] {
                    let y = be.node(id);
                    let one_minus = be.add_const(&be.scale(&y, -1.0)?, 1.0)?;
                    let d = be.mul(&y, &one_minus)?;
                    send(x, be.mul(g, &d)?)?;
                }
            }
            Op::Relu(x) => {
                if relevant[x] {
                    let xv = self.value_of(x);
                    let mask = tensor::map("relu_mask", &xv, |t| if t > 0.0 { 1.0 } else { 0.0 })?;
                    send(x, be.mul(g, &be.constant(mask))?)?;
                }
            }
            Op::Sin(x) => {
                if relevant[x] {
                    let d = be.cos(&be.node(x))?;
                    send(x, be.mul(g, &d)?)?;
                }
            }
            Op::Cos(x) => {
                if relevant[x] {
                    let d = be.scale(&be.sin(&be.node(x))?, -1.0)?;
                    send(x, be.mul(g, &d)?)?;
                }
            }
            Op::Exp(x) => {
                if relevant[x] {
                    send(x, be.mul(g, &be.node(id))?)?;
                }
            }
            Op::Square(x) => {
                if relevant[x] {
                    let d = be.scale(&be.node(x), 2.0)?;
                    send(x, be.mul(g, &d)?)?;
                }
            }
            Op::Sum(x) => {
                if relevant[x] {
                    send(x, be.expand(g, &shape(x))?)?;
                }
            }
            Op::Mean(x) => {
                if relevant[x] {
                    let s = shape(x);
                    let n = s.iter().product::<usize>().max(1) as f64;
                    send(x, be.expand(&be.scale(g, 1.0 / n)?, &s)?)?;
                }
            }
            Op::Scale(x, c) => {
                if relevant[x] {
                    send(x, be.scale(g, c)?)?;
                }
            }
            Op::AddConst(x, _) => {
                if relevant[x] {
                    send(x, g.clone())?;
                }
            }
            Op::Expand(x, _) => {
                if relevant[x] {
                    send(x, be.reduce_to(g, &shape(x))?)?;
                }
            }
            Op::Index(x, i) => {
                if relevant[x] {
                    send(x, be.scatter(g, i, &shape(x))?)?;
                }
            }
            Op::Scatter(x, i, _) => {
                if relevant[x] {
                    let picked = be.index(g, i)?;
                    send(x, be.reduce_to(&picked, &shape(x))?)?;
                }
            }
        }
        Ok(())
    }
}

/// Arithmetic used by the backward rules, over either plain tensors or graph nodes.
trait Backend {
    type V: Clone;
    fn node(&self, id: NodeId) -> Self::V;
    fn constant(&self, t: Tensor) -> Self::V;
    fn shape(&self, v: &Self::V) -> Vec<usize>;
    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul(&self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Result<Self::V>;
    fn scale(&self, a: &Self::V, c: f64) -> Result<Self::V>;
    fn add_const(&self, a: &Self::V, c: f64) -> Result<Self::V>;
    fn square(&self, a: &Self::V) -> Result<Self::V>;
    fn sin(&self, a: &Self::V) -> Result<Self::V>;
    fn cos(&self, a: &Self::V) -> Result<Self::V>;
    fn sum(&self, a: &Self::V) -> Result<Self::V>;
    fn expand(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn index(&self, a: &Self::V, i: usize) -> Result<Self::V>;
    fn scatter(&self, a: &Self::V, i: usize, shape: &[usize]) -> Result<Self::V>;

    /// Sums a broadcast gradient back down to an operand's shape.
    fn reduce_to(&self, g: &Self::V, shape: &[usize]) -> Result<Self::V> {
        if self.shape(g) == shape {
            Ok(g.clone())
        } else {
            self.expand(&self.sum(g)?, shape)
        }
    }
}

struct Raw<'a> {
    graph: &'a Graph,
}

impl Backend for Raw<'_> {
    type V = Rc<Tensor>;

    fn node(&self, id: NodeId) -> Self::V {
        self.graph.value_of(id)
    }
    fn constant(&self, t: Tensor) -> Self::V {
        Rc::new(t)
    }
    fn shape(&self, v: &Self::V) -> Vec<usize> {
        v.shape().to_vec()
    }
    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(tensor::zip("add", a, b, |x, y| x + y)?))
    }
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(tensor::zip("mul", a, b, |x, y| x * y)?))
    }
    fn matmul(&self, a: &Self::V, b: &Self::V, ta: bool, tb: bool) -> Result<Self::V> {
        Ok(Rc::new(tensor::matmul(a, b, ta, tb)?))
    }
    fn scale(&self, a: &Self::V, c: f64) -> Result<Self::V> {
        Ok(Rc::new(tensor::map("scale", a, |t| t * c)?))
    }
    fn add_const(&self, a: &Self::V, c: f64) -> Result<Self::V> {
        Ok(Rc::new(tensor::map("add_scalar", a, |t| t + c)?))
    }
    fn square(&self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(tensor::map("square", a, |t| t * t)?))
    }
    fn sin(&self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(tensor::map("sin", a, f64::sin)?))
    }
    fn cos(&self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(tensor::map("cos", a, f64::cos)?))
    }
    fn sum(&self, a: &Self::V) -> Result<Self::V> {
        Ok(Rc::new(tensor::sum(a)?))
    }
    fn expand(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(tensor::expand(a, shape)?))
    }
    fn index(&self, a: &Self::V, i: usize) -> Result<Self::V> {
        Ok(Rc::new(tensor::index(a, i)?))
    }
    fn scatter(&self, a: &Self::V, i: usize, shape: &[usize]) -> Result<Self::V> {
        Ok(Rc::new(tensor::scatter(a, i, shape)?))
    }
}

struct Recorded<'a> {
    graph: &'a Graph,
}

impl Backend for Recorded<'_> {
    type V = NodeId;

    fn node(&self, id: NodeId) -> NodeId {
        id
    }
    fn constant(&self, t: Tensor) -> NodeId {
        self.graph.push(Op::Constant, Rc::new(t))
    }
    fn shape(&self, v: &NodeId) -> Vec<usize> {
        self.graph.shape_of(*v)
    }
    fn add(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.apply(Op::Add(*a, *b))
    }
    fn mul(&self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.apply(Op::Mul(*a, *b))
    }
    fn matmul(&self, a: &NodeId, b: &NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        self.graph.apply(Op::MatMul {
            a: *a,
            b: *b,
            ta,
            tb,
        })
    }
    fn scale(&self, a: &NodeId, c: f64) -> Result<NodeId> {
        self.graph.apply(Op::Scale(*a, c))
    }
    fn add_const(&self, a: &NodeId, c: f64) -> Result<NodeId> {
        self.graph.apply(Op::AddConst(*a, c))
    }
    fn square(&self, a: &NodeId) -> Result<NodeId> {
        self.graph.apply(Op::Square(*a))
    }
    fn sin(&self, a: &NodeId) -> Result<NodeId> {
        self.graph.apply(Op::Sin(*a))
    }
    fn cos(&self, a: &NodeId) -> Result<NodeId> {
        self.graph.apply(Op::Cos(*a))
    }
    fn sum(&self, a: &NodeId) -> Result<NodeId> {
        self.graph.apply(Op::Sum(*a))
    }
    fn expand(&self, a: &NodeId, shape: &[usize]) -> Result<NodeId> {
        self.graph.apply(Op::Expand(*a, shape.to_vec()))
    }
    fn index(&self, a: &NodeId, i: usize) -> Result<NodeId> {
        self.graph.apply(Op::Index(*a, i))
    }
    fn scatter(&self, a: &NodeId, i: usize, shape: &[usize]) -> Result<NodeId> {
        self.graph.apply(Op::Scatter(*a, i, shape.to_vec()))
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, op: Op) -> Result<Var<'g>> {
        Ok(Var {
            graph: self.graph,
            id: self.graph.apply(op)?,
        })
    }

    fn binary(&self, other: &Var<'g>, op: impl FnOnce(NodeId, NodeId) -> Op) -> Result<Var<'g>> {
        self.graph.check(other)?;
        self.unary(op(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(other, Op::Mul)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)`, transposing either operand on the fly.
    pub fn matmul_t(&self, other: &Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.binary(other, |a, b| Op::MatMul { a, b, ta, tb })
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(Op::Tanh(self.id))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(Op::Sigmoid(self.id))
    }

    pub fn sin(&self) -> Result<Var<'g>> {
        self.unary(Op::Sin(self.id))
    }

    pub fn cos(&self) -> Result<Var<'g>> {
        self.unary(Op::Cos(self.id))
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(Op::Exp(self.id))
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary(Op::Square(self.id))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary(Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        self.unary(Op::Mean(self.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::AddConst(self.id, c))
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&self, i: usize) -> Result<Var<'g>> {
        self.unary(Op::Index(self.id, i))
    }

    /// Forward identity; blocks all gradient flow in both backward modes.
    pub fn stop_gradient(&self) -> Result<Var<'g>> {
        self.unary(Op::StopGradient(self.id))
    }
}
