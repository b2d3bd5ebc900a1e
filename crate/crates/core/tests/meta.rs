use num_rational::Ratio;
use proptest::prelude::*;
use rand::Rng;
use warpgrad_core::autodiff::{finite_diff_gradient, grad_map_relative_error, GradMap, Graph, ParamStore, Tensor};
use warpgrad_core::meta::{
    continual_weight, joint_objective, leap_objective, maml_objective, warp_meta_loss_approx, warp_meta_loss_full,
    warp_step, ContinualWeighting, ExtendedPoint, LeapAccumulator, MamlTask, MetaLoss, MetaObjectiveKind,
    DEFAULT_UNROLL_LIMIT,
};
use warpgrad_core::network::{build_network, mlp_architecture, Activation, Batch, WarpKind, WarpedNetwork};
use warpgrad_core::objective::Objective;
use warpgrad_core::tasks::{split_rng, StreamRng};

fn uniform(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()).unwrap()
}

fn batch(rng: &mut StreamRng) -> Batch {
    let n = rng.gen_range(2..=5);
    Batch::new(uniform(rng, &[n, 2], 2.0), uniform(rng, &[n, 1], 1.0)).unwrap()
}

struct Instance {
    net: WarpedNetwork,
    store: ParamStore,
    train: Batch,
    val: Batch,
    alpha: f64,
}

/// Small warped net with every slot redrawn, so warps are far from the identity.
fn instance(seed: u64) -> Instance {
    let mut rng = split_rng(seed, 0x5E);
    let kind = if rng.gen() {
        WarpKind::Linear
    } else {
        WarpKind::Residual {
            hidden: vec![3],
            activation: Activation::Tanh,
        }
    };
    let act = [Activation::Tanh, Activation::Sigmoid][rng.gen_range(0..2)];
    let (net, mut store) = build_network(&mlp_architecture(2, &[4, 3], 1, act, Some(&kind)), seed).unwrap();
    for id in net.partition().all_ids() {
        let shape = store.get(&id).unwrap().shape().to_vec();
        store.set(&id, uniform(&mut rng, &shape, 0.8)).unwrap();
    }
    let (train, val) = (batch(&mut rng), batch(&mut rng));
    let alpha = rng.gen_range(0.05..=0.5);
    Instance {
        net,
        store,
        train,
        val,
        alpha,
    }
}

fn loss_at(objective: &dyn Objective, store: &ParamStore) -> warpgrad_core::Result<f64> {
    let g = Graph::new();
    Ok(objective.loss(&g, &store.bind(&g))?.item())
}

#[test]
fn full_meta_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let Instance { net, store, train, val, alpha } = instance(seed);
        let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
        let p = net.partition();
        let analytic = warp_meta_loss_full(&store, p, &task, &meta, alpha).unwrap();
        let fd = finite_diff_gradient(
            |s| Ok(warp_meta_loss_full(s, p, &task, &meta, alpha)?.value),
            &store,
            &p.warp_ids,
            1e-5,
        )
        .unwrap();
        let err = grad_map_relative_error(&analytic.grad, &fd);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn approx_meta_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let Instance { net, store, train, val, alpha } = instance(seed);
        let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
        let p = net.partition();
        let analytic = warp_meta_loss_approx(&store, p, &task, &meta, alpha).unwrap();
        let mut frozen = store.clone();
        frozen.add_scaled(&net.task_gradient(&store, &task.batch).unwrap(), -alpha).unwrap();
        assert_eq!(analytic.value, loss_at(&meta, &frozen).unwrap());
        let fd = finite_diff_gradient(|s| loss_at(&meta, s), &frozen, &p.warp_ids, 1e-5).unwrap();
        let err = grad_map_relative_error(&analytic.grad, &fd);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn the_two_objectives_differ_away_from_zero_step() {
    let Instance { net, store, train, val, alpha } = instance(3);
    let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
    let p = net.partition();
    let full = warp_meta_loss_full(&store, p, &task, &meta, alpha).unwrap();
    let approx = warp_meta_loss_approx(&store, p, &task, &meta, alpha).unwrap();
    assert_eq!(full.value.to_bits(), approx.value.to_bits());
    let mut diff = full.grad.clone();
    diff.accumulate(&approx.grad, -1.0).unwrap();
    assert!(diff.norm() > 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn full_equals_approx_at_zero_step(seed in any::<u64>()) {
        let Instance { net, store, train, val, .. } = instance(seed);
        let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
        let p = net.partition();
        let full = warp_step(&store, p, &task, &meta, 0.0, MetaObjectiveKind::Full).unwrap();
        let approx = warp_step(&store, p, &task, &meta, 0.0, MetaObjectiveKind::Approx).unwrap();
        prop_assert_eq!(full.meta_loss.to_bits(), approx.meta_loss.to_bits());
        let scale = 1.0 + full.meta_grad.norm();
        for (id, g) in full.meta_grad.iter() {
            for (a, b) in g.data().iter().zip(approx.meta_grad.get(id).unwrap().data()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale, "{} {} {}", id, a, b);
            }
        }
        prop_assert!(grad_map_relative_error(&full.task_grad, &approx.task_grad) <= 1e-12);
    }

    #[test]
    fn leap_is_invariant_to_splitting_a_straight_chord(
        a in prop::collection::vec(-3.0f64..3.0, 3),
        b in prop::collection::vec(-3.0f64..3.0, 3),
        la in 0.0f64..5.0,
        lb in 0.0f64..5.0,
        s in 0.01f64..0.99,
    ) {
        let point = |x: Vec<f64>, loss: f64| ExtendedPoint {
            theta: GradMap::from_pairs(&["w".to_string()], vec![Tensor::row(&x)]),
            loss,
        };
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * (y - x)).collect();
        let whole = leap_objective(&[point(a.clone(), la), point(b.clone(), lb)]).unwrap();
        let split = leap_objective(&[point(a, la), point(mid, la + s * (lb - la)), point(b, lb)]).unwrap();
        prop_assert!((whole - split).abs() <= 1e-10 * (1.0 + whole));
    }

    #[test]
    fn joint_objective_keeps_its_terms_apart(
        l in -5.0f64..5.0, c in -5.0f64..5.0, gl in -5.0f64..5.0, gc in -5.0f64..5.0,
        dl in -1.0f64..1.0, dc in -1.0f64..1.0, lambda in 0.0f64..3.0,
    ) {
        let ml = |v: f64, g: f64| MetaLoss {
            value: v,
            grad: GradMap::from_pairs(&["phi".to_string()], vec![Tensor::scalar(g)]),
        };
        let mc = |v: f64, g: f64| MetaLoss {
            value: v,
            grad: GradMap::from_pairs(&["theta".to_string()], vec![Tensor::scalar(g)]),
        };
        let base = joint_objective(&ml(l, gl), &mc(c, gc), lambda).unwrap();
        let moved_c = joint_objective(&ml(l, gl), &mc(c + dc, gc + dc), lambda).unwrap();
        let moved_l = joint_objective(&ml(l + dl, gl + dl), &mc(c, gc), lambda).unwrap();
        prop_assert_eq!(&base.g_phi, &moved_c.g_phi);
        prop_assert_eq!(&base.g_theta0, &moved_l.g_theta0);
        prop_assert_eq!(base.value, l + lambda * c);
    }
}

#[test]
fn leap_term_matches_finite_differences_of_the_chord() {
    for seed in 0..20 {
        let Instance { net, store, train, alpha, .. } = instance(seed);
        let ids = net.partition().task_ids.clone();
        let values = |s: &ParamStore| {
            let mut m = GradMap::new();
            for id in &ids {
                m.insert(id.clone(), s.get(id).unwrap().clone());
            }
            m
        };
        let head = net.inner_sgd_step(&store, &train, alpha).unwrap();
        let head_point = ExtendedPoint {
            theta: values(&head),
            loss: net.evaluate(&head, &train).unwrap(),
        };
        let mut acc = LeapAccumulator::new();
        let tail = ExtendedPoint {
            theta: values(&store),
            loss: net.evaluate(&store, &train).unwrap(),
        };
        acc.push(tail, net.task_gradient(&store, &train).unwrap()).unwrap();
        acc.push(head_point.clone(), GradMap::new()).unwrap();
        let chord = |s: &ParamStore| {
            let mut d = head_point.theta.clone();
            d.accumulate(&values(s), -1.0)?;
            let dl = head_point.loss - net.evaluate(s, &train)?;
            Ok((d.dot(&d) + dl * dl).sqrt())
        };
        let fd = finite_diff_gradient(chord, &store, &ids, 1e-5).unwrap();
        let err = grad_map_relative_error(&acc.grad, &fd);
        assert!(err <= 1e-4, "seed {seed}: {err}");
        assert_eq!(acc.steps, 1);
    }
}

#[test]
fn maml_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let Instance { net, store, train, val, alpha } = instance(seed);
        let (tr, te) = (net.batch_objective(train), net.batch_objective(val));
        let tasks = [MamlTask { train: &tr, test: &te }];
        let ids = net.partition().task_ids.clone();
        let k = 1 + (seed as usize % 3);
        let analytic = maml_objective(&store, &ids, &tasks, alpha, k, DEFAULT_UNROLL_LIMIT).unwrap();
        let fd = finite_diff_gradient(
            |s| Ok(maml_objective(s, &ids, &tasks, alpha, k, DEFAULT_UNROLL_LIMIT)?.value),
            &store,
            &ids,
            1e-5,
        )
        .unwrap();
        let err = grad_map_relative_error(&analytic.grad, &fd);
        assert!(err <= 1e-4, "seed {seed} K={k}: {err}");
    }
}

#[test]
fn maml_refuses_unrolls_past_the_limit() {
    let Instance { net, store, train, val, alpha } = instance(0);
    let (tr, te) = (net.batch_objective(train), net.batch_objective(val));
    let tasks = [MamlTask { train: &tr, test: &te }];
    let ids = net.partition().task_ids.clone();
    assert!(maml_objective(&store, &ids, &tasks, alpha, DEFAULT_UNROLL_LIMIT + 1, DEFAULT_UNROLL_LIMIT).is_err());
}

/// Total weight that sub-task `i` receives over a whole sequence of `T` sub-tasks of `n` steps.
fn rational_total(mode: ContinualWeighting, i: usize, n: usize, total: usize) -> Ratio<i64> {
    (i..=total)
        .map(|t| {
            let per = match mode {
                ContinualWeighting::Remaining => Ratio::new(1, (n * (total - t + 1)) as i64),
                ContinualWeighting::Uniform => Ratio::new(1, t as i64),
                ContinualWeighting::Equalized => Ratio::new(1, (n * (total - i + 1)) as i64),
            };
            per * Ratio::from_integer(n as i64)
        })
        .sum()
}

#[test]
fn continual_weights_agree_with_exact_arithmetic() {
    let (n, total) = (20, 5);
    for mode in [ContinualWeighting::Remaining, ContinualWeighting::Uniform, ContinualWeighting::Equalized] {
        for i in 1..=total {
            let float: f64 = (i..=total)
                .map(|t| n as f64 * continual_weight(mode, t, i, n, total).unwrap())
                .sum();
            let exact = rational_total(mode, i, n, total);
            let exact = *exact.numer() as f64 / *exact.denom() as f64;
            assert!((float - exact).abs() <= 1e-12, "{mode:?} i={i}");
        }
    }
}

#[test]
fn equalized_weighting_telescopes_to_one() {
    for (n, total) in [(20, 5), (1, 1), (3, 7)] {
        for i in 1..=total {
            assert_eq!(rational_total(ContinualWeighting::Equalized, i, n, total), Ratio::from_integer(1));
        }
    }
}

#[test]
fn per_step_weighting_favours_early_sub_tasks() {
    // each sub-task i collects the harmonic number H_{T−i+1}
    let totals: Vec<Ratio<i64>> =
        (1..=5).map(|i| rational_total(ContinualWeighting::Remaining, i, 20, 5)).collect();
    assert_eq!(totals[0], Ratio::new(137, 60));
    assert_eq!(totals[4], Ratio::from_integer(1));
    assert!(totals.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn continual_weight_examples() {
    assert_eq!(continual_weight(ContinualWeighting::Remaining, 1, 1, 20, 5).unwrap(), 0.01);
    assert_eq!(continual_weight(ContinualWeighting::Remaining, 5, 3, 20, 5).unwrap(), 0.05);
    assert_eq!(continual_weight(ContinualWeighting::Uniform, 2, 1, 20, 5).unwrap(), 0.5);
    assert!(continual_weight(ContinualWeighting::Remaining, 2, 3, 20, 5).is_err());
}
