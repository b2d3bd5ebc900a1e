//! Meta-training loops: online, offline with a replay buffer, and continual.

mod buffer;
mod continual;
mod offline;
mod online;
mod optimizer;

pub use buffer::ReplayBuffer;
pub use continual::{ContinualTrainer, ContinualTrainerState, ExperienceStream, StreamStepReport};
pub use offline::{OfflineTrainer, OfflineTrainerState, SweepReport};
pub use online::{MetaStepReport, OnlineTrainer, OnlineTrainerState, TaskReport};
pub use optimizer::{OuterOptimizer, OuterOptimizerKind, OuterOptimizerState};

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::meta::{
    maml_objective, warp_step, ContinualWeighting, ExtendedPoint, LeapAccumulator, MamlTask, MetaGradient,
    MetaObjectiveKind, SampleObjectives, TrajectorySample, DEFAULT_UNROLL_LIMIT,
};
use crate::network::ParameterPartition;

/// Meta-learned prior over the initialisation θ0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    None,
    Maml,
    Leap,
}

/// Hyper-parameters shared by all meta-training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Inner (task) learning rate α.
    pub alpha: f64,
    /// Meta learning rate β.
    pub beta: f64,
    /// Weight λ of the initialisation prior.
    pub lambda: f64,
    /// Samples (or steps) per warp update.
    pub eta: usize,
    /// Inner steps per task.
    pub k: usize,
    /// Tasks per meta-batch.
    pub meta_batch: usize,
    /// Meta-iterations (online), warp updates (offline) or stream steps (continual).
    pub meta_steps: usize,
    pub seed: u64,
    pub objective: MetaObjectiveKind,
    pub prior: Prior,
    pub weighting: ContinualWeighting,
    pub optimizer: OuterOptimizerKind,
    pub unroll_limit: usize,
    /// Inner SGD momentum; 0 disables it.
    pub momentum: f64,
    /// Worker threads for task adaptation; 1 keeps everything on the caller's thread.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.001,
            lambda: 0.0,
            eta: 1,
            k: 5,
            meta_batch: 1,
            meta_steps: 1,
            seed: 0,
            objective: MetaObjectiveKind::Full,
            prior: Prior::None,
            weighting: ContinualWeighting::Remaining,
            optimizer: OuterOptimizerKind::adam(),
            unroll_limit: DEFAULT_UNROLL_LIMIT,
            momentum: 0.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.eta == 0 {
            return Err(invalid("eta must be at least 1"));
        }
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if self.meta_batch == 0 {
            return Err(invalid("meta_batch must be at least 1"));
        }
        if self.threads == 0 {
            return Err(invalid("threads must be at least 1"));
        }
        if self.prior == Prior::Maml && self.k > self.unroll_limit {
            return Err(invalid(format!(
                "MAML prior unrolls {} steps, above the limit of {}",
                self.k, self.unroll_limit
            )));
        }
        self.optimizer.validate()
    }
}

/// The data of one task's adaptation run.
///
/// Implementations must be deterministic: the same episode asked for the same
/// step yields the same data.
pub trait Episode: Send {
    type Data: SampleObjectives + Send;

    /// Task batch and independent meta batch for inner step `k`.
    fn step_data(&mut self, k: usize) -> Result<Self::Data>;

    /// Task-slot values to start from instead of the shared initialisation.
    fn initial_theta(&mut self) -> Result<Option<GradMap>> {
        Ok(None)
    }

    /// Train (`task`) and test (`meta`) objectives for the MAML prior.
    fn maml_data(&mut self) -> Result<Self::Data> {
        self.step_data(0)
    }
}

/// Deterministic source of episodes keyed by `(meta_step, task_index)`.
pub trait TaskSource: Sync {
    type Episode: Episode;

    fn episode(&self, meta_step: usize, task_index: usize) -> Result<Self::Episode>;
}

/// What one adaptation run produced.
pub(crate) struct Adaptation<D> {
    pub grads: MetaGradient,
    pub task_losses: Vec<f64>,
    pub meta_losses: Vec<f64>,
    pub final_theta: GradMap,
    pub leap_degenerate: usize,
    /// Filled when collecting for the replay buffer.
    pub samples: Vec<TrajectorySample<D>>,
    pub snapshots: Vec<GradMap>,
    pub leap_terms: Vec<GradMap>,
}

/// What an adaptation run should compute.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    /// Accumulate meta-gradients online.
    Online,
    /// Record samples only; meta-gradients come later.
    Collect,
}

pub(crate) fn task_values(store: &ParamStore, ids: &[String]) -> Result<GradMap> {
    let mut out = GradMap::new();
    for id in ids {
        out.insert(id.clone(), store.get(id)?.clone());
    }
    Ok(out)
}

fn diverged(meta_step: usize, task: usize, step: usize, e: Error) -> Error {
    match e {
        Error::Diverged { .. } => e,
        other => Error::Diverged {
            meta_step,
            task,
            step,
            reason: other.to_string(),
        },
    }
}

/// Runs `K` inner steps from the initialisation in `theta0`.
pub(crate) fn adapt<E: Episode>(
    config: &TrainConfig,
    theta0: &ParamStore,
    partition: &ParameterPartition,
    episode: &mut E,
    meta_step: usize,
    task: usize,
    mode: Mode,
) -> Result<Adaptation<E::Data>> {
    let mut store = theta0.clone();
    if let Some(init) = episode.initial_theta().map_err(|e| diverged(meta_step, task, 0, e))? {
        for (id, t) in init.iter() {
            if !partition.task_ids.iter().any(|x| x == id) {
                return Err(invalid(format!("episode initialises `{id}`, which is not a task slot")));
            }
            store.set(id, t.clone())?;
        }
    }
    let mut grads = MetaGradient::new();
    let mut leap = LeapAccumulator::new();
    let mut velocity: Option<GradMap> = None;
    let mut out = Adaptation {
        grads: MetaGradient::new(),
        task_losses: Vec::with_capacity(config.k),
        meta_losses: Vec::with_capacity(config.k),
        final_theta: GradMap::new(),
        leap_degenerate: 0,
        samples: Vec::new(),
        snapshots: Vec::new(),
        leap_terms: Vec::new(),
    };
    let leap_on = config.prior == Prior::Leap;
    // Collection freezes φ, so the inner update only needs the cheaper kind.
    let kind = match mode {
        Mode::Online => config.objective,
        Mode::Collect => MetaObjectiveKind::Approx,
    };

    for k in 0..config.k {
        let fail = |e| diverged(meta_step, task, k, e);
        let momentum_k = velocity.clone();
        let data = episode.step_data(k).map_err(fail)?;
        let ws = warp_step(&store, partition, data.task(), data.meta(), config.alpha, kind).map_err(fail)?;
        if !ws.meta_grad.is_finite() || !ws.task_grad.is_finite() || !ws.meta_loss.is_finite() {
            return Err(fail(Error::NonFinite { op: "meta-gradient" }));
        }
        out.task_losses.push(ws.task_loss);
        out.meta_losses.push(ws.meta_loss);
        let theta_k = task_values(&store, &partition.task_ids)?;
        if mode == Mode::Online {
            grads.add_phi(&ws.meta_grad)?;
        }
        if leap_on {
            let before = leap.grad.clone();
            leap.push(
                ExtendedPoint {
                    theta: theta_k.clone(),
                    loss: ws.task_loss,
                },
                ws.task_grad.clone(),
            )?;
            if k > 0 {
                let mut term = leap.grad.clone();
                term.accumulate(&before, -1.0)?;
                out.leap_terms.push(term);
            }
        }

        let step = match (config.momentum, velocity.take()) {
            (m, Some(mut v)) if m > 0.0 => {
                v = v.scaled(m);
                v.accumulate(&ws.task_grad, 1.0)?;
                v
            }
            _ => ws.task_grad.clone(),
        };
        if config.momentum > 0.0 {
            velocity = Some(step.clone());
        }
        if mode == Mode::Collect {
            out.snapshots.push(theta_k.clone());
            out.samples.push(TrajectorySample {
                task_id: task,
                step: k,
                theta: theta_k,
                momentum: momentum_k,
                data,
            });
        }
        store.add_scaled(&step, -config.alpha)?;
    }

    let theta_final = task_values(&store, &partition.task_ids)?;
    if leap_on {
        // the last chord ends at θ_K, scored on the batch of step K
        let fail = |e| diverged(meta_step, task, config.k, e);
        let data = episode.step_data(config.k).map_err(fail)?;
        let g = crate::autodiff::Graph::new();
        let vars = store.bind(&g);
        let loss = data.task().loss(&g, &vars).map_err(fail)?.item();
        let before = leap.grad.clone();
        leap.push(
            ExtendedPoint {
                theta: theta_final.clone(),
                loss,
            },
            GradMap::new(),
        )?;
        let mut term = leap.grad.clone();
        term.accumulate(&before, -1.0)?;
        out.leap_terms.push(term);
        if mode == Mode::Online {
            grads.add_theta0(&leap.grad)?;
        }
        out.leap_degenerate = leap.degenerate;
    }
    if config.prior == Prior::Maml && mode == Mode::Online {
        let fail = |e| diverged(meta_step, task, config.k, e);
        let data = episode.maml_data().map_err(fail)?;
        let tasks = [MamlTask {
            train: data.task(),
            test: data.meta(),
        }];
        let c = maml_objective(theta0, &partition.task_ids, &tasks, config.alpha, config.k, config.unroll_limit)
            .map_err(fail)?;
        grads.add_theta0(&c.grad)?;
    }
    if mode == Mode::Collect {
        out.snapshots.push(theta_final.clone());
    }
    out.final_theta = theta_final;
    out.grads = grads;
    Ok(out)
}

/// Runs `f` for every task index, on a pool when `threads > 1`, returning
/// results in task order.
pub(crate) fn for_each_task<T, F>(threads: usize, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if threads <= 1 {
        return (0..count).map(f).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(f).collect::<Vec<_>>())
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { eta: 0, ..Default::default() },
            TrainConfig { k: 0, ..Default::default() },
            TrainConfig { alpha: -1.0, ..Default::default() },
            TrainConfig { lambda: f64::NAN, ..Default::default() },
            TrainConfig { prior: Prior::Maml, k: 11, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json_like_parse();
        assert!(err);
    }

    // serde_json is a dev-dependency of this crate
    fn serde_json_like_parse() -> bool {
        serde_json::from_str::<TrainConfig>(r#"{"alpah": 0.1}"#).is_err()
            && serde_json::from_str::<TrainConfig>(r#"{"alpha": 0.1}"#).is_ok()
    }
}
