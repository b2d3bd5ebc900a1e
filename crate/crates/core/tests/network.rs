use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use warpgrad_core::autodiff::{Graph, ParamStore, Role, Tensor, Var};
use warpgrad_core::network::{
    build_network, continual_sine_architecture, mlp_architecture, preconditioned_gradient, taylor_order, Activation,
    Batch, ExplicitWarp, WarpKind, WarpedNetwork,
};
use warpgrad_core::objective::PointLoss;
use warpgrad_core::tasks::{split_rng, StreamRng};
use warpgrad_core::Result;

fn residual() -> WarpKind {
    WarpKind::Residual {
        hidden: vec![6],
        activation: Activation::Tanh,
    }
}

fn uniform(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap()
}

fn random_batch(rng: &mut StreamRng, n: usize, in_dim: usize, out_dim: usize) -> Batch {
    Batch::new(uniform(rng, &[n, in_dim], 2.0), uniform(rng, &[n, out_dim], 1.0)).unwrap()
}

/// Task slots of `store` only, for the unwarped twin of a network.
fn task_only(net: &WarpedNetwork, store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for id in &net.partition().task_ids {
        out.insert(id.clone(), Role::Task, store.get(id).unwrap().clone()).unwrap();
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn residual_warps_are_the_identity_at_init(seed in any::<u64>(), relu in any::<bool>()) {
        let act = if relu { Activation::Relu } else { Activation::Tanh };
        let specs = mlp_architecture(2, &[7, 5], 3, act, Some(&residual()));
        let (net, store) = build_network(&specs, seed).unwrap();
        let plain = net.unwarped();
        let plain_store = task_only(&net, &store);
        let mut rng = split_rng(seed, 1);
        let x = uniform(&mut rng, &[4, 2], 3.0);
        let warped = net.predict(&store, &x).unwrap();
        let unwarped = plain.predict(&plain_store, &x).unwrap();
        prop_assert!(max_diff(warped.data(), unwarped.data()) <= 1e-12);

        let batch = random_batch(&mut rng, 4, 2, 3);
        let a = net.inner_sgd_step(&store, &batch, 0.1).unwrap();
        let b = plain.inner_sgd_step(&plain_store, &batch, 0.1).unwrap();
        for id in &net.partition().task_ids {
            prop_assert!(max_diff(a.get(id).unwrap().data(), b.get(id).unwrap().data()) <= 1e-10);
        }
    }

    #[test]
    fn linear_warps_match_the_explicit_preconditioner(seed in any::<u64>()) {
        let mut rng = split_rng(seed, 2);
        let act = [Activation::Tanh, Activation::Sigmoid][rng.gen_range(0..2)];
        let specs = mlp_architecture(2, &[4, 3], 1, act, Some(&WarpKind::Linear));
        let (net, mut store) = build_network(&specs, seed).unwrap();
        for id in net.partition().all_ids() {
            let shape = store.get(&id).unwrap().shape().to_vec();
            let mut t = uniform(&mut rng, &shape, 0.8);
            if net.partition().warp_ids.contains(&id) && shape.len() == 2 && shape[0] == shape[1] {
                for i in 0..shape[0] {
                    t.data_mut()[i * shape[0] + i] += 1.0;
                }
            }
            store.set(&id, t).unwrap();
        }
        let n = rng.gen_range(2..=5);
        let batch = random_batch(&mut rng, n, 2, 1);
        let warped = net.task_gradient(&store, &batch).unwrap();
        let explicit = preconditioned_gradient(&net, &store, &batch).unwrap();
        for (id, g) in warped.iter() {
            let e = explicit.get(id).unwrap();
            prop_assert!(max_diff(g.data(), e.data()) <= 1e-10, "{}", id);
        }
    }

    #[test]
    fn partition_is_disjoint_and_complete(seed in any::<u64>(), linear in any::<bool>()) {
        let kind = if linear { WarpKind::Linear } else { residual() };
        let (net, store) = build_network(&mlp_architecture(1, &[4, 4], 1, Activation::Relu, Some(&kind)), seed).unwrap();
        let p = net.partition();
        p.validate(&store).unwrap();
        prop_assert!(p.task_ids.iter().all(|id| !p.warp_ids.contains(id)));
        prop_assert_eq!(p.task_ids.clone(), store.ids_with_role(Role::Task));
        prop_assert_eq!(p.warp_ids.clone(), store.ids_with_role(Role::Warp));
        let back: ParamStore = serde_json::from_str(&serde_json::to_string(&store).unwrap()).unwrap();
        p.validate(&back).unwrap();
        prop_assert_eq!(back, store);
    }
}

#[test]
fn continual_architecture_partition() {
    let (net, store) = build_network(&continual_sine_architecture(), 0).unwrap();
    net.partition().validate(&store).unwrap();
    assert_eq!(net.partition().task_ids.len(), 10);
    // four residual blocks of two affine maps each
    assert_eq!(net.partition().warp_ids.len(), 16);
    assert!(net.partition().warp_ids.iter().all(|id| id.contains(".fc")));
}

#[test]
fn warp_metric_is_positive_semidefinite() {
    let mut rng = split_rng(21, 0);
    for i in 0..5 {
        let mut warp = ExplicitWarp::residual(2, vec![30, 30], Activation::Tanh, i).unwrap();
        warp.randomize(rng.gen(), 1.0);
        for _ in 0..100 {
            let theta = [rng.gen_range(-3.0..=3.0), rng.gen_range(-3.0..=3.0)];
            let m = warp.metric_inverse(&theta).unwrap();
            assert!((&m - m.transpose()).abs().max() <= 1e-12);
            assert!(warp.min_metric_eigenvalue(&theta).unwrap() >= -1e-12);
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut warp = ExplicitWarp::residual(3, vec![5], Activation::Tanh, 2).unwrap();
    warp.randomize(9, 0.8);
    let theta = [0.2, -0.7, 1.1];
    let j = warp.jacobian(&theta).unwrap();
    let eps = 1e-6;
    let mut fd = DMatrix::zeros(3, 3);
    for c in 0..3 {
        let (mut up, mut down) = (theta, theta);
        up[c] += eps;
        down[c] -= eps;
        let (a, b) = (warp.map(&up).unwrap(), warp.map(&down).unwrap());
        for r in 0..3 {
            fd[(r, c)] = (a[r] - b[r]) / (2.0 * eps);
        }
    }
    assert!((j - fd).abs().max() <= 1e-8);
}

/// `L(γ) = Σ_i c_i sin(γ_i) + d_i γ_i²`.
struct Bowl {
    c: [f64; 2],
    d: [f64; 2],
}

impl PointLoss for Bowl {
    fn eval<'g>(&self, graph: &'g Graph, point: Var<'g>) -> Result<Var<'g>> {
        let c = graph.constant(Tensor::row(&self.c));
        let d = graph.constant(Tensor::row(&self.d));
        point.sin()?.mul(&c)?.add(&point.square()?.mul(&d)?)?.sum()
    }
}

#[test]
fn taylor_gap_is_second_order() {
    let mut rng = split_rng(33, 0);
    let mut orders = Vec::new();
    while orders.len() < 20 {
        let mut warp = ExplicitWarp::residual(2, vec![8], Activation::Tanh, rng.gen()).unwrap();
        warp.randomize(rng.gen(), 0.7);
        let loss = Bowl {
            c: [rng.gen_range(0.5..=2.0), rng.gen_range(0.5..=2.0)],
            d: [rng.gen_range(0.1..=1.0), rng.gen_range(0.1..=1.0)],
        };
        let theta = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        if let Some(o) = taylor_order(&warp, &loss, &theta, &[1e-2, 5e-3, 2.5e-3]).unwrap() {
            orders.push(o);
        }
    }
    let mean = orders.iter().sum::<f64>() / orders.len() as f64;
    assert!((1.7..=2.3).contains(&mean), "mean order {mean}");
}

#[test]
fn identity_warp_has_zero_taylor_gap() {
    let warp = ExplicitWarp::residual(2, vec![4], Activation::Tanh, 0).unwrap();
    let loss = Bowl { c: [1.0, 1.0], d: [1.0, 1.0] };
    assert_eq!(taylor_order(&warp, &loss, &[0.3, 0.4], &[1e-2]).unwrap(), None);
}
