//! Explicit 2-D warp meta-learned over random loss surfaces.

use serde::{Deserialize, Serialize};
use warpgrad_core::autodiff::{GradMap, Graph, ParamStore, ParamVars, Tensor, Var};
use warpgrad_core::meta::SampleObjectives;
use warpgrad_core::network::{Activation, ExplicitWarp};
use warpgrad_core::objective::{Objective, PointLoss};
use warpgrad_core::tasks::{init_surface_point, sample_surface_task, split_rng, stream_id, Surface2DTask};
use warpgrad_core::train::{Episode, Prior, TaskSource, TrainConfig};

use crate::error::{config_err, Result};

pub const THETA: &str = "theta";

pub const SURFACE_STREAM: u8 = 0xD0;
const INIT_STREAM: u8 = 0xD1;
const EVAL_SURFACE_STREAM: u8 = 0xDE;
const EVAL_INIT_STREAM: u8 = 0xDF;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synth2dProtocol {
    /// Hidden widths of the residual warp.
    pub warp_hidden: Vec<usize>,
    pub eval_surfaces: usize,
    /// Shared initial points per held-out surface.
    pub eval_inits: usize,
}

impl Default for Synth2dProtocol {
    fn default() -> Self {
        Self {
            warp_hidden: vec![30, 30],
            eval_surfaces: 20,
            eval_inits: 10,
        }
    }
}

impl Synth2dProtocol {
    pub fn validate(&self, train: &TrainConfig) -> Result<()> {
        if self.warp_hidden.is_empty() || self.warp_hidden.contains(&0) {
            return Err(config_err("warp_hidden needs at least one positive width"));
        }
        if self.eval_surfaces == 0 || self.eval_inits == 0 {
            return Err(config_err("evaluation needs at least one surface and one initial point"));
        }
        if train.prior != Prior::None {
            return Err(config_err("every episode starts from its own point, so the prior must be none"));
        }
        if train.meta_batch > 0xFFFF {
            return Err(config_err("at most 65535 initial points per surface"));
        }
        Ok(())
    }

    /// The warp `Ω: ℝ² → ℝ²`, identity at initialisation.
    pub fn warp(&self, seed: u64) -> Result<ExplicitWarp> {
        Ok(ExplicitWarp::residual(2, self.warp_hidden.clone(), Activation::Tanh, seed)?)
    }
}

/// `f(Ω(θ))` for one surface.
pub struct SurfaceObjective<'w> {
    pub warp: &'w ExplicitWarp,
    pub surface: Surface2DTask,
}

impl Objective for SurfaceObjective<'_> {
    fn loss<'g>(&self, graph: &'g Graph, params: &ParamVars<'g>) -> warpgrad_core::Result<Var<'g>> {
        let gamma = self.warp.apply(graph, params, params.get(THETA)?)?;
        self.surface.eval(graph, gamma)
    }
}

impl SampleObjectives for SurfaceObjective<'_> {
    fn task(&self) -> &dyn Objective {
        self
    }

    fn meta(&self) -> &dyn Objective {
        self
    }
}

/// One surface per meta-step, one initial point per task index.
pub struct SurfaceSource<'w> {
    pub warp: &'w ExplicitWarp,
    pub seed: u64,
}

pub struct SurfaceEpisode<'w> {
    warp: &'w ExplicitWarp,
    surface: Surface2DTask,
    init: [f64; 2],
}

impl<'w> TaskSource for SurfaceSource<'w> {
    type Episode = SurfaceEpisode<'w>;

    fn episode(&self, meta_step: usize, task_index: usize) -> warpgrad_core::Result<SurfaceEpisode<'w>> {
        let surface = sample_surface_task(&mut split_rng(self.seed, stream_id(SURFACE_STREAM, meta_step as u64, 0)));
        let init = init_surface_point(&mut split_rng(
            self.seed,
            stream_id(INIT_STREAM, meta_step as u64, task_index as u64),
        ));
        Ok(SurfaceEpisode {
            warp: self.warp,
            surface,
            init,
        })
    }
}

impl<'w> Episode for SurfaceEpisode<'w> {
    type Data = SurfaceObjective<'w>;

    fn step_data(&mut self, _k: usize) -> warpgrad_core::Result<SurfaceObjective<'w>> {
        Ok(SurfaceObjective {
            warp: self.warp,
            surface: self.surface,
        })
    }

    fn initial_theta(&mut self) -> warpgrad_core::Result<Option<GradMap>> {
        let mut m = GradMap::new();
        m.insert(THETA, Tensor::row(&self.init));
        Ok(Some(m))
    }
}

/// Initial store: the point slot (overridden per episode) plus the warp slots.
pub fn initial_store(warp: &ExplicitWarp) -> Result<ParamStore> {
    Ok(warp.joint_store(THETA, &[0.0, 0.0])?)
}

/// Loss after each of `k` steps (entry 0 is the starting loss).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub surface: usize,
    pub init: usize,
    pub plain: Vec<f64>,
    pub warped: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceComparison {
    pub surface: Surface2DTask,
    pub plain_final: f64,
    pub warped_final: f64,
}

impl SurfaceComparison {
    pub fn warped_wins(&self) -> bool {
        self.warped_final < self.plain_final
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synth2dEvaluation {
    pub trajectories: Vec<Trajectory>,
    pub surfaces: Vec<SurfaceComparison>,
}

impl Synth2dEvaluation {
    pub fn win_rate(&self) -> f64 {
        let wins = self.surfaces.iter().filter(|s| s.warped_wins()).count();
        wins as f64 / self.surfaces.len().max(1) as f64
    }

    pub fn mean_plain(&self) -> f64 {
        self.surfaces.iter().map(|s| s.plain_final).sum::<f64>() / self.surfaces.len().max(1) as f64
    }

    pub fn mean_warped(&self) -> f64 {
        self.surfaces.iter().map(|s| s.warped_final).sum::<f64>() / self.surfaces.len().max(1) as f64
    }
}

/// Gradient descent on `θ ↦ f(Ω(θ))` from `init`; returns the loss curve.
fn descend(objective: &dyn Objective, store: &mut ParamStore, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let ids = vec![THETA.to_string()];
    let mut curve = Vec::with_capacity(k + 1);
    for _ in 0..k {
        let g = Graph::new();
        let vars = store.bind(&g);
        let loss = objective.loss(&g, &vars)?;
        curve.push(loss.item());
        let grad = warpgrad_core::autodiff::gradients(&g, loss, &vars, &ids)?;
        store.add_scaled(&grad, -alpha)?;
    }
    let g = Graph::new();
    curve.push(objective.loss(&g, &store.bind(&g))?.item());
    Ok(curve)
}

/// Plain and warped descent from shared starting points on held-out surfaces.
///
/// Plain descent uses the same warp network with its identity initialisation,
/// which is exactly gradient descent on `f`.
pub fn evaluate(
    trained: &ParamStore,
    protocol: &Synth2dProtocol,
    alpha: f64,
    k: usize,
    seed: u64,
) -> Result<Synth2dEvaluation> {
    let warp = protocol.warp(seed)?;
    let mut trajectories = Vec::new();
    let mut surfaces = Vec::new();
    for s in 0..protocol.eval_surfaces {
        let surface = sample_surface_task(&mut split_rng(seed, stream_id(EVAL_SURFACE_STREAM, s as u64, 0)));
        let objective = SurfaceObjective { warp: &warp, surface };
        let (mut plain_sum, mut warped_sum) = (0.0, 0.0);
        for i in 0..protocol.eval_inits {
            let init = init_surface_point(&mut split_rng(seed, stream_id(EVAL_INIT_STREAM, s as u64, i as u64)));
            let mut plain_store = warp.joint_store(THETA, &init)?;
            let plain = descend(&objective, &mut plain_store, alpha, k)?;
            let mut warped_store = trained.clone();
            warped_store.set(THETA, Tensor::row(&init))?;
            let warped = descend(&objective, &mut warped_store, alpha, k)?;
            plain_sum += plain[k];
            warped_sum += warped[k];
            trajectories.push(Trajectory {
                surface: s,
                init: i,
                plain,
                warped,
            });
        }
        let m = protocol.eval_inits as f64;
        surfaces.push(SurfaceComparison {
            surface,
            plain_final: plain_sum / m,
            warped_final: warped_sum / m,
        });
    }
    Ok(Synth2dEvaluation { trajectories, surfaces })
}
