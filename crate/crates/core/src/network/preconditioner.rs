//! Explicit block preconditioners for networks whose warp-layers are linear.
//!
//! With linear warps the warped network folds into a plain network with
//! effective weights `W̃ = L·W·R`, where `L` is the product of warps feeding a
//! task layer and `R` the product of warps applied to its output. The warped
//! gradient is then `Lᵀ·∇_W̃·Rᵀ`, and an SGD step on `W` moves `W̃` by
//! `−α·(L·Lᵀ)·∇_W̃·(Rᵀ·R)`: a block-diagonal preconditioner.
//!
//! Everything here uses plain loops on purpose. It is an oracle for the
//! autodiff pathway and must not share code with it.

use super::{Activation, Batch, LayerKind, WarpedNetwork};
use crate::autodiff::{GradMap, ParamStore, Role, Tensor};
use crate::error::{invalid, Result};

/// Preconditioning block of one task linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerBlock {
    pub weight_id: String,
    pub bias_id: String,
    /// Product of the warps applied to this layer's input (`in × in`).
    pub left: Tensor,
    /// Product of the warps applied to this layer's output (`out × out`).
    pub right: Tensor,
}

impl PreconditionerBlock {
    /// `L·Lᵀ`, acting on the rows of the effective weight gradient.
    pub fn input_metric(&self) -> Tensor {
        mm(&self.left, &tr(&self.left))
    }

    /// `Rᵀ·R`, acting on the columns of the effective weight gradient.
    pub fn output_metric(&self) -> Tensor {
        mm(&tr(&self.right), &self.right)
    }

    /// Warped gradient of `W` given the folded gradient `∇_W̃`.
    pub fn weight_gradient(&self, folded: &Tensor) -> Tensor {
        mm(&mm(&tr(&self.left), folded), &tr(&self.right))
    }

    /// Warped gradient of `b` given the folded gradient `∇_b̃`.
    pub fn bias_gradient(&self, folded: &Tensor) -> Tensor {
        mm(folded, &tr(&self.right))
    }

    /// Change of the effective weights after an SGD step of size `alpha`.
    pub fn effective_step(&self, folded: &Tensor, alpha: f64) -> Tensor {
        let p = mm(&mm(&self.input_metric(), folded), &self.output_metric());
        scale(&p, -alpha)
    }
}

/// Builds one block per task linear layer.
///
/// Fails if any warp-layer is not linear, if a task layer is not feed-forward,
/// or if a warp is not adjacent to a task linear layer.
pub fn explicit_preconditioner(net: &WarpedNetwork, store: &ParamStore) -> Result<Vec<PreconditionerBlock>> {
    Ok(fold(net, store)?.0)
}

enum Folded {
    Linear { w: Tensor, b: Tensor },
    Act(Activation),
}

fn fold(net: &WarpedNetwork, store: &ParamStore) -> Result<(Vec<PreconditionerBlock>, Vec<Folded>)> {
    let mut blocks: Vec<PreconditionerBlock> = Vec::new();
    let mut pending: Option<Tensor> = None;
    let mut open = false;
    let mut order: Vec<Option<Activation>> = Vec::new();

    for (index, spec) in net.layer_specs().iter().enumerate() {
        let slots = net.layer_slots(index);
        match (&spec.kind, spec.role) {
            (LayerKind::Residual { .. }, _) => {
                return Err(invalid(format!(
                    "layer {index} is a residual block; explicit preconditioning needs linear warps"
                )))
            }
            (LayerKind::Linear, Role::Warp) => {
                let t = store.get(&slots[0])?.clone();
                if open {
                    let last = blocks.last_mut().expect("open block");
                    last.right = mm(&last.right, &t);
                } else {
                    pending = Some(match pending {
                        Some(p) => mm(&p, &t),
                        None => t,
                    });
                }
            }
            (LayerKind::Linear, Role::Task) => {
                let left = pending.take().unwrap_or_else(|| Tensor::identity(spec.in_dim));
                blocks.push(PreconditionerBlock {
                    weight_id: slots[0].clone(),
                    bias_id: slots[1].clone(),
                    left,
                    right: Tensor::identity(spec.out_dim),
                });
                order.push(None);
                open = true;
            }
            (LayerKind::Activation { activation }, _) => {
                if pending.is_some() {
                    return Err(invalid(format!("warp before layer {index} is not attached to a task linear layer")));
                }
                order.push(Some(*activation));
                open = false;
            }
        }
    }
    if pending.is_some() {
        return Err(invalid("trailing warp is not attached to a task linear layer"));
    }

    let mut folded = Vec::with_capacity(order.len());
    let mut next = blocks.iter();
    for item in order {
        match item {
            Some(a) => folded.push(Folded::Act(a)),
            None => {
                let block = next.next().expect("one block per linear");
                let w = store.get(&block.weight_id)?;
                let b = store.get(&block.bias_id)?;
                folded.push(Folded::Linear {
                    w: mm(&mm(&block.left, w), &block.right),
                    b: mm(b, &block.right),
                });
            }
        }
    }
    Ok((blocks, folded))
}

/// Task gradient of a linear-warp network, built from the blocks.
///
/// The folded network is differentiated by hand and each block maps its
/// folded gradient back to the warped parameterisation.
pub fn preconditioned_gradient(net: &WarpedNetwork, store: &ParamStore, batch: &Batch) -> Result<GradMap> {
    if batch.is_empty() {
        return Err(invalid("task loss needs a non-empty batch"));
    }
    let (blocks, folded) = fold(net, store)?;
    let n = batch.len();

    // forward, keeping every layer input
    let mut inputs: Vec<Tensor> = Vec::with_capacity(folded.len());
    let mut a = batch.inputs.clone();
    for layer in &folded {
        inputs.push(a.clone());
        a = match layer {
            Folded::Linear { w, b } => {
                let mut z = mm(&a, w);
                let cols = z.cols();
                for (i, v) in z.data_mut().iter_mut().enumerate() {
                    *v += b.data()[i % cols];
                }
                z
            }
            Folded::Act(f) => map(&a, |x| f.eval(x)),
        };
    }

    let mut delta = Tensor::zeros(a.shape().to_vec());
    for i in 0..a.numel() {
        delta.data_mut()[i] = (a.data()[i] - batch.targets.data()[i]) / n as f64;
    }

    let mut grads_rev: Vec<(Tensor, Tensor)> = Vec::new();
    for (layer, input) in folded.iter().zip(&inputs).rev() {
        match layer {
            Folded::Linear { w, .. } => {
                let gw = mm(&tr(input), &delta);
                let mut gb = Tensor::zeros(vec![1, delta.cols()]);
                for r in 0..delta.rows() {
                    for c in 0..delta.cols() {
                        gb.data_mut()[c] += delta.data()[r * delta.cols() + c];
                    }
                }
                grads_rev.push((gw, gb));
                delta = mm(&delta, &tr(w));
            }
            Folded::Act(f) => {
                for i in 0..delta.numel() {
                    delta.data_mut()[i] *= f.derivative(input.data()[i]);
                }
            }
        }
    }

    let mut out = GradMap::new();
    for (block, (gw, gb)) in blocks.iter().zip(grads_rev.into_iter().rev()) {
        out.insert(block.weight_id.clone(), block.weight_gradient(&gw));
        out.insert(block.bias_id.clone(), block.bias_gradient(&gb));
    }
    Ok(out)
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "oracle matmul shapes");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a.data()[i * k + l] * b.data()[l * m + j];
            }
            out[i * m + j] = s;
        }
    }
    Tensor::from_rows(n, m, out).expect("shape")
}

fn tr(a: &Tensor) -> Tensor {
    let (n, m) = (a.rows(), a.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data()[i * m + j];
        }
    }
    Tensor::from_rows(m, n, out).expect("shape")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("shape")
}

fn scale(a: &Tensor, c: f64) -> Tensor {
    map(a, |x| c * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, mlp_architecture, LayerSpec, WarpKind};

    fn batch() -> Batch {
        Batch::new(
            Tensor::from_rows(3, 2, vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]).unwrap(),
            Tensor::from_rows(3, 1, vec![1.0, -0.5, 0.25]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identity_warp_gives_identity_blocks() {
        let specs = mlp_architecture(2, &[2], 1, Activation::Tanh, Some(&WarpKind::Linear));
        let (net, store) = build_network(&specs, 1).unwrap();
        let blocks = explicit_preconditioner(&net, &store).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[1].input_metric(), Tensor::identity(2));
        let plain = net.unwarped().task_gradient(&store, &batch()).unwrap();
        let explicit = preconditioned_gradient(&net, &store, &batch()).unwrap();
        for id in plain.ids() {
            let d = plain.get(&id).unwrap().axpy(-1.0, explicit.get(&id).unwrap()).unwrap();
            assert!(d.max_abs() <= 1e-14);
        }
    }

    #[test]
    fn residual_warps_are_rejected() {
        let warp = WarpKind::Residual {
            hidden: vec![2],
            activation: Activation::Tanh,
        };
        let specs = mlp_architecture(2, &[2], 1, Activation::Tanh, Some(&warp));
        let (net, store) = build_network(&specs, 1).unwrap();
        assert!(explicit_preconditioner(&net, &store).is_err());
    }

    #[test]
    fn dangling_warp_is_rejected() {
        let specs = vec![
            LayerSpec::linear(2, 2),
            LayerSpec::activation(2, Activation::Tanh),
            LayerSpec::linear_warp(2),
            LayerSpec::activation(2, Activation::Tanh),
            LayerSpec::linear(2, 1),
        ];
        let (net, store) = build_network(&specs, 1).unwrap();
        assert!(explicit_preconditioner(&net, &store).is_err());
    }

    #[test]
    fn scaling_warp_scales_the_block() {
        // y = (x·W + b)·cI: warped gradient is c times the folded gradient
        let specs = vec![LayerSpec::linear(2, 1), LayerSpec::linear_warp(1)];
        let (net, mut store) = build_network(&specs, 3).unwrap();
        let c = 2.5;
        store.set("1.weight", Tensor::from_rows(1, 1, vec![c]).unwrap()).unwrap();
        let blocks = explicit_preconditioner(&net, &store).unwrap();
        let g = Tensor::from_rows(2, 1, vec![1.0, -3.0]).unwrap();
        assert_eq!(blocks[0].weight_gradient(&g).data(), &[2.5, -7.5]);
        assert_eq!(blocks[0].output_metric().data(), &[6.25]);
    }

    #[test]
    fn hand_derived_two_by_two() {
        // One task linear W (2×2, zero bias) then warp T; loss ½‖x·W·T − y‖² on one sample.
        let specs = vec![LayerSpec::linear(2, 2), LayerSpec::linear_warp(2)];
        let (net, mut store) = build_network(&specs, 0).unwrap();
        store.set("0.weight", Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        store.set("0.bias", Tensor::zeros(vec![1, 2])).unwrap();
        store.set("1.weight", Tensor::from_rows(2, 2, vec![2.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
        let b = Batch::new(Tensor::row(&[1.0, 1.0]), Tensor::row(&[0.0, 0.0])).unwrap();
        // output = (1,1)·T = (2, 2); residual r = (2,2); ∇_W = xᵀ (r·Tᵀ) = xᵀ (6, 2)
        let g = preconditioned_gradient(&net, &store, &b).unwrap();
        assert_eq!(g.get("0.weight").unwrap().data(), &[6.0, 2.0, 6.0, 2.0]);
        assert_eq!(g.get("0.bias").unwrap().data(), &[6.0, 2.0]);
    }
}
