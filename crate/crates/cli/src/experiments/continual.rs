//! Continual sine regression: sub-tasks learned left to right, warps meta-learned
//! to protect earlier sub-tasks.

use serde::{Deserialize, Serialize};
use warpgrad_core::meta::{ContinualMetaObjective, ContinualWeighting, SampleObjectives};
use warpgrad_core::network::{mlp_architecture, Activation, Batch, BatchObjective, LayerSpec, WarpKind, WarpedNetwork};
use warpgrad_core::objective::Objective;
use warpgrad_core::tasks::{split_rng, stream_id, ContinualSineTask, StreamRng, SUBTASKS};
use warpgrad_core::train::{Episode, Prior, TaskSource, TrainConfig};

use crate::error::{config_err, Result};

pub const TASK_STREAM: u8 = 0xC0;
const STEP_STREAM: u8 = 0xC1;
const EVAL_TASK_STREAM: u8 = 0xCE;
const EVAL_SET_STREAM: u8 = 0xCF;

/// Sub-task order used for the shuffled evaluation (1-based).
pub const SHUFFLED_ORDER: [usize; SUBTASKS] = [2, 4, 5, 3, 1];

/// Protocol knobs beyond the shared training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualProtocol {
    /// Width of the four hidden task layers.
    pub width: usize,
    /// Hidden width of each residual warp block.
    pub warp_hidden: usize,
    /// Inner steps on each sub-task.
    pub steps_per_subtask: usize,
    pub batch_size: usize,
    /// Points per sub-task in each meta-objective validation batch.
    pub validation_size: usize,
    pub eval_tasks: usize,
    /// Points per sub-task in the fixed evaluation sets.
    pub eval_points: usize,
    /// Evaluate mid-training every this many meta-steps; 0 evaluates at the end only.
    pub eval_every: usize,
    pub shuffled_order: Vec<usize>,
}

impl Default for ContinualProtocol {
    fn default() -> Self {
        Self {
            width: 32,
            warp_hidden: 16,
            steps_per_subtask: 20,
            batch_size: 5,
            validation_size: 5,
            eval_tasks: 100,
            eval_points: 50,
            eval_every: 0,
            shuffled_order: SHUFFLED_ORDER.to_vec(),
        }
    }
}

impl ContinualProtocol {
    pub fn validate(&self, train: &TrainConfig) -> Result<()> {
        if self.width == 0 || self.warp_hidden == 0 || self.steps_per_subtask == 0 || self.batch_size == 0 || self.validation_size == 0 || self.eval_points == 0 {
            return Err(config_err("continual sizes must be positive"));
        }
        if train.k != self.steps_per_subtask * SUBTASKS {
            return Err(config_err(format!(
                "k must equal {SUBTASKS} × steps_per_subtask = {}, got {}",
                self.steps_per_subtask * SUBTASKS,
                train.k
            )));
        }
        if train.k >= 256 || train.meta_batch >= 256 {
            return Err(config_err("continual streams support at most 255 steps and 255 tasks per meta-batch"));
        }
        if train.prior != Prior::None {
            return Err(config_err("the continual experiment keeps the initialisation fixed (prior must be none)"));
        }
        let mut sorted = self.shuffled_order.clone();
        sorted.sort_unstable();
        if sorted != (1..=SUBTASKS).collect::<Vec<_>>() {
            return Err(config_err(format!("shuffled_order must be a permutation of 1..={SUBTASKS}")));
        }
        Ok(())
    }
}

impl ContinualProtocol {
    /// `1 → width ×4 → 1` ReLU task-learner, each non-linearity followed by a
    /// residual tanh warp block.
    pub fn architecture(&self) -> Vec<LayerSpec> {
        mlp_architecture(
            1,
            &[self.width; 4],
            1,
            Activation::Relu,
            Some(&WarpKind::Residual {
                hidden: vec![self.warp_hidden],
                activation: Activation::Tanh,
            }),
        )
    }
}

/// Task sequences for meta-training, keyed by `(meta_step, task)`.
pub struct ContinualSource<'n> {
    pub net: &'n WarpedNetwork,
    pub seed: u64,
    pub protocol: ContinualProtocol,
    pub weighting: ContinualWeighting,
}

/// One task sequence presented left to right.
pub struct ContinualEpisode<'n> {
    net: &'n WarpedNetwork,
    task: ContinualSineTask,
    seed: u64,
    meta_step: usize,
    task_index: usize,
    protocol: ContinualProtocol,
    weighting: ContinualWeighting,
}

/// Current sub-task batch and the incremental validation objective.
pub struct ContinualStep<'n> {
    pub subtask: usize,
    task: BatchObjective<'n>,
    meta: ContinualMetaObjective<'n>,
}

impl SampleObjectives for ContinualStep<'_> {
    fn task(&self) -> &dyn Objective {
        &self.task
    }

    fn meta(&self) -> &dyn Objective {
        &self.meta
    }
}

impl<'n> TaskSource for ContinualSource<'n> {
    type Episode = ContinualEpisode<'n>;

    fn episode(&self, meta_step: usize, task_index: usize) -> warpgrad_core::Result<ContinualEpisode<'n>> {
        let mut rng = split_rng(self.seed, stream_id(TASK_STREAM, meta_step as u64, task_index as u64));
        Ok(ContinualEpisode {
            net: self.net,
            task: ContinualSineTask::sample(&mut rng),
            seed: self.seed,
            meta_step,
            task_index,
            protocol: self.protocol.clone(),
            weighting: self.weighting,
        })
    }
}

impl<'n> Episode for ContinualEpisode<'n> {
    type Data = ContinualStep<'n>;

    fn step_data(&mut self, k: usize) -> warpgrad_core::Result<ContinualStep<'n>> {
        let n = self.protocol.steps_per_subtask;
        let t = (k / n + 1).min(SUBTASKS);
        let minor = ((self.task_index as u64) << 8) | k as u64;
        let mut rng = split_rng(self.seed, stream_id(STEP_STREAM, self.meta_step as u64, minor));
        let batch = self.task.minibatch(t, self.protocol.batch_size, &mut rng)?.batch;
        let validation = (1..=t)
            .map(|i| Ok(self.task.minibatch(i, self.protocol.validation_size, &mut rng)?.batch))
            .collect::<warpgrad_core::Result<Vec<Batch>>>()?;
        let meta = ContinualMetaObjective::new(self.net, &validation, t, n, SUBTASKS, self.weighting)?;
        Ok(ContinualStep {
            subtask: t,
            task: self.net.batch_objective(batch),
            meta,
        })
    }
}

/// Mean validation loss per sub-task after each adaptation step.
///
/// `rows[k][i]` is the loss on sub-task `i + 1` after `k + 1` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub order: Vec<usize>,
    pub steps_per_subtask: usize,
    pub rows: Vec<[f64; SUBTASKS]>,
}

impl LossBreakdown {
    /// Sub-task being learned at update `k` (0-based).
    pub fn current_subtask(&self, k: usize) -> usize {
        self.order[(k / self.steps_per_subtask).min(SUBTASKS - 1)]
    }

    /// Step index at which sub-task `t` finishes.
    pub fn completion_step(&self, t: usize) -> usize {
        let pos = self.order.iter().position(|&s| s == t).expect("order is a permutation");
        (pos + 1) * self.steps_per_subtask - 1
    }

    /// Mean current-sub-task loss at the end of each block, in presentation order.
    pub fn block_end_losses(&self) -> Vec<(usize, f64)> {
        self.order
            .iter()
            .map(|&t| (t, self.rows[self.completion_step(t)][t - 1]))
            .collect()
    }

    /// For each sub-task but the last presented: (t, loss at completion, loss at the final step).
    pub fn forgetting(&self) -> Vec<(usize, f64, f64)> {
        let last = self.rows.len() - 1;
        self.order[..SUBTASKS - 1]
            .iter()
            .map(|&t| (t, self.rows[self.completion_step(t)][t - 1], self.rows[last][t - 1]))
            .collect()
    }
}

/// Adapts `eval_tasks` held-out sequences from the fixed initialisation with φ
/// frozen, presenting sub-tasks in `order`.
pub fn evaluate(
    net: &WarpedNetwork,
    params: &warpgrad_core::autodiff::ParamStore,
    alpha: f64,
    seed: u64,
    protocol: &ContinualProtocol,
    order: &[usize],
) -> Result<LossBreakdown> {
    let n = protocol.steps_per_subtask;
    let k_total = n * SUBTASKS;
    let mut sums = vec![[0.0; SUBTASKS]; k_total];
    for e in 0..protocol.eval_tasks {
        let mut rng: StreamRng = split_rng(seed, stream_id(EVAL_TASK_STREAM, e as u64, 0));
        let task = ContinualSineTask::sample(&mut rng);
        let mut set_rng = split_rng(seed, stream_id(EVAL_SET_STREAM, e as u64, 0));
        let sets = (1..=SUBTASKS)
            .map(|t| Ok(task.minibatch(t, protocol.eval_points, &mut set_rng)?.batch))
            .collect::<Result<Vec<Batch>>>()?;
        let mut store = params.clone();
        for (k, row) in sums.iter_mut().enumerate() {
            let t = order[k / n];
            let batch = task.minibatch(t, protocol.batch_size, &mut rng)?.batch;
            let g = net.task_gradient(&store, &batch)?;
            store.add_scaled(&g, -alpha)?;
            for (i, set) in sets.iter().enumerate() {
                row[i] += net.evaluate(&store, set)?;
            }
        }
    }
    let m = protocol.eval_tasks.max(1) as f64;
    let rows = sums.into_iter().map(|r| r.map(|v| v / m)).collect();
    Ok(LossBreakdown {
        order: order.to_vec(),
        steps_per_subtask: n,
        rows,
    })
}
