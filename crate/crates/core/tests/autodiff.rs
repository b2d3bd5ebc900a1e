use proptest::prelude::*;
use warpgrad_core::autodiff::{
    finite_diff_gradient, grad_map_relative_error, gradients, GradMap, Graph, ParamStore, Role, Tensor, Var,
};
use warpgrad_core::network::{build_network, mlp_architecture, Activation, Batch};
use warpgrad_core::Result;

const OPS: usize = 19;
/// Ops whose gradient is the true derivative (all but the stop-gradient probe).
const DIFFERENTIABLE: usize = 18;

/// Scalar probe of one op on `a`, `b` (both `[2, 3]`) and the constant `m` (`[3, 3]`).
fn probe<'g>(op: usize, a: Var<'g>, b: Var<'g>, m: Var<'g>) -> Result<Var<'g>> {
    let out = match op {
        0 => a.add(&b)?.square()?,
        1 => a.sub(&b)?.square()?,
        2 => a.mul(&b)?,
        3 => a.matmul(&m)?.mul(&b)?,
        4 => a.matmul_t(&b, false, true)?.square()?,
        5 => a.matmul_t(&b, true, false)?.square()?,
        6 => a.tanh()?,
        7 => a.relu()?.mul(&b)?,
        8 => a.sigmoid()?,
        9 => a.sin()?,
        10 => a.cos()?,
        11 => a.exp()?,
        12 => a.square()?,
        13 => return a.mul(&b)?.mean()?.square(),
        14 => a.scale(-2.5)?.mul(&b)?,
        15 => a.neg()?.mul(&b)?,
        16 => a.add_scalar(0.7)?.square()?,
        17 => return a.mul(&b)?.sum()?.mul(&a.index(4)?),
        _ => a.stop_gradient()?.mul(&b)?,
    };
    out.sum()
}

fn store(a: Vec<f64>, b: Vec<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a", Role::Task, Tensor::new(vec![2, 3], a).unwrap()).unwrap();
    s.insert("b", Role::Task, Tensor::new(vec![2, 3], b).unwrap()).unwrap();
    s
}

fn ids() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

fn probe_value(op: usize, m: &Tensor, s: &ParamStore) -> Result<f64> {
    let g = Graph::new();
    let v = s.bind(&g);
    Ok(probe(op, v.get("a")?, v.get("b")?, g.constant(m.clone()))?.item())
}

fn probe_gradient(op: usize, m: &Tensor, s: &ParamStore) -> Result<GradMap> {
    let g = Graph::new();
    let v = s.bind(&g);
    let out = probe(op, v.get("a")?, v.get("b")?, g.constant(m.clone()))?;
    gradients(&g, out, &v, &ids())
}

/// Entries with magnitude in [0.1, 2], away from the relu kink.
fn entries(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.1f64..2.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m }), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_central_differences(a in entries(6), b in entries(6), m in entries(9)) {
        let s = store(a, b);
        let m = Tensor::new(vec![3, 3], m).unwrap();
        for op in 0..DIFFERENTIABLE {
            let analytic = probe_gradient(op, &m, &s).unwrap();
            let fd = finite_diff_gradient(|st: &ParamStore| probe_value(op, &m, st), &s, &ids(), 1e-5).unwrap();
            let err = grad_map_relative_error(&analytic, &fd);
            prop_assert!(err <= 1e-4, "op {} error {}", op, err);
        }
    }

    #[test]
    fn stop_gradient_is_a_forward_identity(a in entries(6)) {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], a).unwrap());
        let y = x.stop_gradient().unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&x.value()), bits(&y.value()));
        let grad = g.backward(y.sum().unwrap(), &[x]).unwrap();
        prop_assert!(grad[0].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn evaluation_is_deterministic(a in entries(6), b in entries(6), m in entries(9), op in 0..OPS) {
        let s = store(a, b);
        let m = Tensor::new(vec![3, 3], m).unwrap();
        let (v1, v2) = (probe_value(op, &m, &s).unwrap(), probe_value(op, &m, &s).unwrap());
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        let (g1, g2) = (probe_gradient(op, &m, &s).unwrap(), probe_gradient(op, &m, &s).unwrap());
        prop_assert_eq!(g1, g2);
    }
}

/// `L_meta(θ − α∇_θ L_task(θ; φ); φ)` for a small bilinear-tanh model.
fn composite<'g>(g: &'g Graph, theta: Var<'g>, phi: Var<'g>, target: &Tensor, alpha: f64) -> Result<Var<'g>> {
    let t = g.constant(target.clone());
    let task = theta.matmul(&phi)?.tanh()?.sub(&t)?.square()?.mean()?;
    let grad = g.grad(task, &[theta])?;
    let updated = theta.sub(&grad[0].scale(alpha)?)?;
    updated.matmul(&phi)?.sin()?.sum()?.add(&phi.square()?.scale(0.1)?.sum()?)
}

#[test]
fn second_order_composite_matches_finite_differences() {
    use rand::Rng;
    let mut rng = warpgrad_core::tasks::split_rng(11, 0);
    let mut draw = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    for _ in 0..20 {
        let mut s = ParamStore::new();
        s.insert("theta", Role::Task, draw(vec![2, 3])).unwrap();
        s.insert("phi", Role::Warp, draw(vec![3, 3])).unwrap();
        let target = draw(vec![2, 3]);
        let value = |st: &ParamStore| -> Result<f64> {
            let g = Graph::new();
            let v = st.bind(&g);
            Ok(composite(&g, v.get("theta")?, v.get("phi")?, &target, 0.3)?.item())
        };
        let g = Graph::new();
        let v = s.bind(&g);
        let out = composite(&g, v.get("theta").unwrap(), v.get("phi").unwrap(), &target, 0.3).unwrap();
        let phi_ids = vec!["phi".to_string()];
        let analytic = gradients(&g, out, &v, &phi_ids).unwrap();
        let fd = finite_diff_gradient(value, &s, &phi_ids, 1e-5).unwrap();
        assert!(grad_map_relative_error(&analytic, &fd) <= 1e-4);
    }
}

#[test]
fn backward_matches_finite_differences_on_a_tanh_network() {
    let specs = mlp_architecture(3, &[5, 4], 2, Activation::Tanh, None);
    let (net, store) = build_network(&specs, 17).unwrap();
    let inputs = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let targets = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
    let batch = Batch::new(inputs, targets).unwrap();
    let ids = net.partition().task_ids.clone();
    let analytic = net.task_gradient(&store, &batch).unwrap();
    let fd = finite_diff_gradient(|s: &ParamStore| net.evaluate(s, &batch), &store, &ids, 1e-5).unwrap();
    assert!(grad_map_relative_error(&analytic, &fd) <= 1e-5);
}
