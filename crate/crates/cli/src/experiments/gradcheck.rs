//! Analytic gradients against central finite differences and other oracles.

use rand::Rng;
use serde::{Deserialize, Serialize};
use warpgrad_core::autodiff::{
    finite_diff_gradient, grad_map_relative_error, GradMap, Graph, ParamStore, Role, Tensor, Var,
};
use warpgrad_core::meta::{warp_meta_loss_approx, warp_meta_loss_full, warp_step, ExtendedPoint, LeapAccumulator, MetaObjectiveKind};
use warpgrad_core::network::{
    build_network, mlp_architecture, preconditioned_gradient, taylor_order, Activation, Batch, ExplicitWarp,
    WarpKind, WarpedNetwork,
};
use warpgrad_core::objective::{Objective, PointLoss};
use warpgrad_core::tasks::{split_rng, stream_id, StreamRng};

use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per check.
    pub instances: usize,
    pub eps: f64,
    /// Largest relative error accepted against finite differences.
    pub tolerance: f64,
    /// Largest absolute difference accepted between the warped and explicitly
    /// preconditioned gradients.
    pub preconditioner_tolerance: f64,
    /// Largest absolute difference between the full and approximate meta-gradients at α = 0.
    pub zero_step_tolerance: f64,
    pub taylor_alphas: Vec<f64>,
    pub taylor_range: [f64; 2],
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            eps: 1e-6,
            tolerance: 1e-4,
            preconditioner_tolerance: 1e-10,
            zero_step_tolerance: 1e-12,
            taylor_alphas: vec![1e-2, 5e-3, 2.5e-3],
            taylor_range: [1.7, 2.3],
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(config_err("gradcheck needs at least one instance per check"));
        }
        if !(self.eps > 0.0) || !(self.tolerance > 0.0) {
            return Err(config_err("eps and tolerance must be positive"));
        }
        if self.taylor_alphas.is_empty() || self.taylor_alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(config_err("taylor_alphas must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one check over all its instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub samples: usize,
    /// Worst error over the samples (for the Taylor check, the mean order).
    pub worst: f64,
    pub threshold: String,
    pub passed: bool,
    /// Set when an instance could not be evaluated at all.
    pub error: Option<String>,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} samples={:<4} worst={:.3e} threshold {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.samples,
            self.worst,
            self.threshold
        )?;
        if let Some(e) = &self.error {
            write!(f, " error: {e}")?;
        }
        Ok(())
    }
}

/// Arguments: config, instance stream, instance index, corrupt flag.
type Check = fn(&GradcheckConfig, &mut StreamRng, usize, bool) -> warpgrad_core::Result<f64>;

/// Runs every check, never stopping at the first failure.
///
/// With `corrupt` set, the analytic side of every gradient check has one sign
/// flipped; the suite must then fail.
pub fn run_gradcheck(config: &GradcheckConfig, corrupt: bool) -> Result<Vec<CheckReport>> {
    config.validate()?;
    let tol = config.tolerance;
    let checks: [(&str, Check, String); 8] = [
        ("per-op first order", op_first_order, format!("<= {tol:e}")),
        ("per-op second order", op_second_order, format!("<= {tol:e}")),
        ("warped task gradient", warped_gradient, format!("<= {tol:e}")),
        ("full meta-gradient", full_meta_gradient, format!("<= {tol:e}")),
        ("approx meta-gradient", approx_meta_gradient, format!("<= {tol:e}")),
        ("leap per-term gradient", leap_term, format!("<= {tol:e}")),
        ("linear warp = preconditioner", linear_equivalence, format!("<= {:e}", config.preconditioner_tolerance)),
        ("full = approx at zero step", zero_step, format!("<= {:e}", config.zero_step_tolerance)),
    ];
    let mut reports = Vec::new();
    for (i, (name, check, threshold)) in checks.into_iter().enumerate() {
        let limit = match i {
            6 => config.preconditioner_tolerance,
            7 => config.zero_step_tolerance,
            _ => tol,
        };
        let mut worst = 0.0_f64;
        let mut error = None;
        let mut samples = 0;
        // the per-op checks cover every op with `instances` draws each
        let count = if i < 2 { config.instances * OPS } else { config.instances };
        for n in 0..count {
            let mut rng = split_rng(config.seed, stream_id(0xE0 + i as u8, n as u64, 0));
            match check(config, &mut rng, n, corrupt) {
                Ok(e) => {
                    worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
                    samples += 1;
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        reports.push(CheckReport {
            name: name.to_string(),
            samples,
            worst,
            threshold,
            passed: error.is_none() && worst <= limit,
            error,
        });
    }
    reports.push(taylor_check(config)?);
    Ok(reports)
}

fn uniform(rng: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Entries bounded away from zero, so kinks and poles stay outside the stencil.
fn away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..=1.5);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

fn flip(mut g: GradMap, corrupt: bool) -> GradMap {
    if corrupt {
        g = g.scaled(-1.0);
    }
    g
}

fn ids(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Scalar probe `Σ w ⊙ op(a, b)` for the op chosen by `which`.
fn op_probe<'g>(which: usize, a: Var<'g>, b: Var<'g>, m: Var<'g>, w: Var<'g>) -> warpgrad_core::Result<Var<'g>> {
    let y = match which {
        0 => a.add(&b)?,
        1 => a.sub(&b)?,
        2 => a.mul(&b)?,
        3 => a.matmul(&m)?.matmul_t(&m, false, true)?,
        4 => a.matmul_t(&m, false, false)?.matmul_t(&m, false, true)?.tanh()?,
        5 => a.relu()?,
        6 => a.sigmoid()?,
        7 => a.sin()?,
        8 => a.cos()?,
        9 => a.exp()?,
        10 => a.square()?,
        11 => a.scale(-1.7)?.add_scalar(0.3)?.neg()?,
        12 => return a.mean()?.mul(&b.sum()?)?.add(&a.index(1)?),
        _ => a.tanh()?,
    };
    y.mul(&w)?.sum()
}

const OPS: usize = 14;

struct OpInstance {
    store: ParamStore,
    m: Tensor,
    w: Tensor,
    which: usize,
}

fn op_instance(rng: &mut StreamRng, which: usize) -> OpInstance {
    let mut store = ParamStore::new();
    store.insert("a", Role::Task, away_from_zero(rng, &[3, 4])).expect("fresh");
    store.insert("b", Role::Task, away_from_zero(rng, &[3, 4])).expect("fresh");
    OpInstance {
        store,
        m: uniform(rng, &[4, 4], 1.0),
        w: uniform(rng, &[3, 4], 1.0),
        which,
    }
}

fn op_value(inst: &OpInstance, s: &ParamStore) -> warpgrad_core::Result<f64> {
    let g = Graph::new();
    let v = s.bind(&g);
    let out = op_probe(inst.which, v.get("a")?, v.get("b")?, g.constant(inst.m.clone()), g.constant(inst.w.clone()))?;
    Ok(out.item())
}

fn op_gradient(inst: &OpInstance, s: &ParamStore) -> warpgrad_core::Result<GradMap> {
    let g = Graph::new();
    let v = s.bind(&g);
    let out = op_probe(inst.which, v.get("a")?, v.get("b")?, g.constant(inst.m.clone()), g.constant(inst.w.clone()))?;
    warpgrad_core::autodiff::gradients(&g, out, &v, &ids(&["a", "b"]))
}

fn op_first_order(c: &GradcheckConfig, rng: &mut StreamRng, n: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let inst = op_instance(rng, n % OPS);
    let analytic = flip(op_gradient(&inst, &inst.store)?, corrupt);
    let fd = finite_diff_gradient(|s| op_value(&inst, s), &inst.store, &ids(&["a", "b"]), c.eps)?;
    Ok(grad_map_relative_error(&analytic, &fd))
}

/// Hessian-vector products through the recorded backward pass.
fn op_second_order(c: &GradcheckConfig, rng: &mut StreamRng, n: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let inst = op_instance(rng, n % OPS);
    let va = uniform(rng, &[3, 4], 1.0);
    let vb = uniform(rng, &[3, 4], 1.0);
    // h(a, b) = ⟨∇f(a, b), v⟩, differentiated analytically and numerically
    let hvp_value = |s: &ParamStore| -> warpgrad_core::Result<f64> {
        let g = op_gradient(&inst, s)?;
        Ok(g.get("a").expect("slot").dot(&va) + g.get("b").expect("slot").dot(&vb))
    };
    let g = Graph::new();
    let v = inst.store.bind(&g);
    let (a, b) = (v.get("a")?, v.get("b")?);
    let out = op_probe(inst.which, a, b, g.constant(inst.m.clone()), g.constant(inst.w.clone()))?;
    let first = g.grad(out, &[a, b])?;
    let h = first[0]
        .mul(&g.constant(va.clone()))?
        .sum()?
        .add(&first[1].mul(&g.constant(vb.clone()))?.sum()?)?;
    let analytic = flip(warpgrad_core::autodiff::gradients(&g, h, &v, &ids(&["a", "b"]))?, corrupt);
    let fd = finite_diff_gradient(hvp_value, &inst.store, &ids(&["a", "b"]), c.eps)?;
    Ok(grad_map_relative_error(&analytic, &fd))
}

/// A small task-learner with random non-identity warps and a random batch.
fn random_net(rng: &mut StreamRng, kind: Option<WarpKind>) -> warpgrad_core::Result<(WarpedNetwork, ParamStore, Batch)> {
    let kind = kind.unwrap_or_else(|| {
        if rng.gen_bool(0.5) {
            WarpKind::Linear
        } else {
            WarpKind::Residual {
                hidden: vec![3],
                activation: Activation::Tanh,
            }
        }
    });
    let act = [Activation::Tanh, Activation::Sigmoid][rng.gen_range(0..2)];
    let specs = mlp_architecture(2, &[4, 3], 1, act, Some(&kind));
    let (net, mut store) = build_network(&specs, rng.gen())?;
    for id in net.partition().all_ids() {
        let shape = store.get(&id)?.shape().to_vec();
        let mut t = uniform(rng, &shape, 0.8);
        if net.partition().warp_ids.contains(&id) && shape.len() == 2 && shape[0] == shape[1] {
            // keep linear warps well conditioned
            for i in 0..shape[0] {
                t.data_mut()[i * shape[0] + i] += 1.0;
            }
        }
        store.set(&id, t)?;
    }
    let n = rng.gen_range(2..=5);
    let batch = Batch::new(uniform(rng, &[n, 2], 2.0), uniform(rng, &[n, 1], 1.0))?;
    Ok((net, store, batch))
}

fn warped_gradient(c: &GradcheckConfig, rng: &mut StreamRng, _: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let (net, store, batch) = random_net(rng, None)?;
    let task = &net.partition().task_ids;
    let analytic = flip(net.task_gradient(&store, &batch)?, corrupt);
    let fd = finite_diff_gradient(|s| net.evaluate(s, &batch), &store, task, c.eps)?;
    Ok(grad_map_relative_error(&analytic, &fd))
}

fn meta_setup(rng: &mut StreamRng) -> warpgrad_core::Result<(WarpedNetwork, ParamStore, Batch, Batch, f64)> {
    let (net, store, train) = random_net(rng, None)?;
    let n = rng.gen_range(2..=5);
    let val = Batch::new(uniform(rng, &[n, 2], 2.0), uniform(rng, &[n, 1], 1.0))?;
    let alpha = rng.gen_range(0.05..=0.5);
    Ok((net, store, train, val, alpha))
}

fn full_meta_gradient(c: &GradcheckConfig, rng: &mut StreamRng, _: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let (net, store, train, val, alpha) = meta_setup(rng)?;
    let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
    let p = net.partition();
    let analytic = flip(warp_meta_loss_full(&store, p, &task, &meta, alpha)?.grad, corrupt);
    let fd = finite_diff_gradient(
        |s| Ok(warp_meta_loss_full(s, p, &task, &meta, alpha)?.value),
        &store,
        &p.warp_ids,
        c.eps,
    )?;
    Ok(grad_map_relative_error(&analytic, &fd))
}

fn approx_meta_gradient(c: &GradcheckConfig, rng: &mut StreamRng, _: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let (net, store, train, val, alpha) = meta_setup(rng)?;
    let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
    let p = net.partition();
    let analytic = flip(warp_meta_loss_approx(&store, p, &task, &meta, alpha)?.grad, corrupt);
    // the updated task parameters are frozen at their value under the base φ
    let step = warp_step(&store, p, &task, &meta, alpha, MetaObjectiveKind::Approx)?;
    let mut frozen = store.clone();
    frozen.add_scaled(&step.task_grad, -alpha)?;
    let fd = finite_diff_gradient(|s| meta_value(&meta, s), &frozen, &p.warp_ids, c.eps)?;
    Ok(grad_map_relative_error(&analytic, &fd))
}

fn meta_value(meta: &dyn Objective, s: &ParamStore) -> warpgrad_core::Result<f64> {
    let g = Graph::new();
    Ok(meta.loss(&g, &s.bind(&g))?.item())
}

/// One Leap term against the numerical gradient of the chord length in its tail point.
fn leap_term(c: &GradcheckConfig, rng: &mut StreamRng, _: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let (net, store, batch) = random_net(rng, None)?;
    let task = net.partition().task_ids.clone();
    let values = |s: &ParamStore| -> warpgrad_core::Result<GradMap> {
        let mut m = GradMap::new();
        for id in &task {
            m.insert(id.clone(), s.get(id)?.clone());
        }
        Ok(m)
    };
    let alpha = rng.gen_range(0.05..=0.5);
    let head = net.inner_sgd_step(&store, &batch, alpha)?;
    let head_point = ExtendedPoint {
        theta: values(&head)?,
        loss: net.evaluate(&head, &batch)?,
    };
    let mut acc = LeapAccumulator::new();
    acc.push(
        ExtendedPoint {
            theta: values(&store)?,
            loss: net.evaluate(&store, &batch)?,
        },
        net.task_gradient(&store, &batch)?,
    )?;
    acc.push(head_point.clone(), GradMap::new())?;
    // the term is the derivative of the chord length in the tail θ_{k−1}, head held fixed
    let analytic = flip(acc.grad.clone(), corrupt);
    let chord = |s: &ParamStore| -> warpgrad_core::Result<f64> {
        let mut d = head_point.theta.clone();
        d.accumulate(&values(s)?, -1.0)?;
        let dl = head_point.loss - net.evaluate(s, &batch)?;
        Ok((d.dot(&d) + dl * dl).sqrt())
    };
    let fd = finite_diff_gradient(chord, &store, &task, c.eps)?;
    Ok(grad_map_relative_error(&analytic, &fd))
}

fn linear_equivalence(_: &GradcheckConfig, rng: &mut StreamRng, _: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let (net, store, batch) = random_net(rng, Some(WarpKind::Linear))?;
    let warped = flip(net.task_gradient(&store, &batch)?, corrupt);
    let explicit = preconditioned_gradient(&net, &store, &batch)?;
    let mut worst = 0.0_f64;
    for (id, g) in warped.iter() {
        let e = explicit.get(id).expect("same slots");
        for (a, b) in g.data().iter().zip(e.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

fn zero_step(_: &GradcheckConfig, rng: &mut StreamRng, _: usize, corrupt: bool) -> warpgrad_core::Result<f64> {
    let (net, store, train, val, _) = meta_setup(rng)?;
    let (task, meta) = (net.batch_objective(train), net.batch_objective(val));
    let p = net.partition();
    let full = flip(warp_meta_loss_full(&store, p, &task, &meta, 0.0)?.grad, corrupt);
    let approx = warp_meta_loss_approx(&store, p, &task, &meta, 0.0)?.grad;
    let mut worst = 0.0_f64;
    for (id, g) in full.iter() {
        for (a, b) in g.data().iter().zip(approx.get(id).expect("same slots").data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// `L(γ) = Σ_i c_i sin(γ_i) + d_i γ_i²` with random coefficients.
struct RandomBowl {
    c: [f64; 2],
    d: [f64; 2],
}

impl PointLoss for RandomBowl {
    fn eval<'g>(&self, graph: &'g Graph, point: Var<'g>) -> warpgrad_core::Result<Var<'g>> {
        let c = graph.constant(Tensor::row(&self.c));
        let d = graph.constant(Tensor::row(&self.d));
        point.sin()?.mul(&c)?.add(&point.square()?.mul(&d)?)?.sum()
    }
}

/// Mean decay order of the gap between the warped update and its first-order
/// Riemannian counterpart, over random 2-D tanh warps.
fn taylor_check(c: &GradcheckConfig) -> Result<CheckReport> {
    let mut orders = Vec::new();
    let mut attempts = 0;
    while orders.len() < c.instances && attempts < 10 * c.instances {
        let mut rng = split_rng(c.seed, stream_id(0xEF, attempts as u64, 0));
        attempts += 1;
        let mut warp = ExplicitWarp::residual(2, vec![8], Activation::Tanh, rng.gen())?;
        warp.randomize(rng.gen(), 0.7);
        let loss = RandomBowl {
            c: [rng.gen_range(0.5..=2.0), rng.gen_range(0.5..=2.0)],
            d: [rng.gen_range(0.1..=1.0), rng.gen_range(0.1..=1.0)],
        };
        let theta = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        if let Some(o) = taylor_order(&warp, &loss, &theta, &c.taylor_alphas)? {
            orders.push(o);
        }
    }
    let mean = orders.iter().sum::<f64>() / orders.len().max(1) as f64;
    let [lo, hi] = c.taylor_range;
    Ok(CheckReport {
        name: "taylor order".into(),
        samples: orders.len(),
        worst: mean,
        threshold: format!("mean in [{lo}, {hi}]"),
        passed: orders.len() == c.instances && (lo..=hi).contains(&mean),
        error: None,
    })
}

