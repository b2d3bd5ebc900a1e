//! Online meta-training: meta-gradients are accumulated during adaptation.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::Result;
use crate::meta::MetaGradient;
use crate::network::ParameterPartition;

use super::{adapt, for_each_task, Mode, OuterOptimizer, TaskSource, TrainConfig};

/// Per-task outcome of one meta-iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    /// Task loss at each inner step, before the update.
    pub task_losses: Vec<f64>,
    /// Meta-loss at each inner step.
    pub meta_losses: Vec<f64>,
    pub leap_degenerate: usize,
}

/// Outcome of one meta-iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub meta_step: usize,
    pub tasks: Vec<TaskReport>,
    pub phi_updated: bool,
    pub theta0_updated: bool,
    /// Norm of the averaged warp meta-gradient.
    pub phi_grad_norm: f64,
}

impl MetaStepReport {
    pub fn mean_task_loss(&self) -> f64 {
        mean(self.tasks.iter().flat_map(|t| &t.task_losses))
    }

    pub fn mean_meta_loss(&self) -> f64 {
        mean(self.tasks.iter().flat_map(|t| &t.meta_losses))
    }
}

fn mean<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Resumable state of [`OnlineTrainer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrainerState {
    /// θ0 and φ.
    pub params: ParamStore,
    pub phi_optimizer: OuterOptimizer,
    pub theta0_optimizer: OuterOptimizer,
    /// Meta-iterations completed.
    pub meta_step: usize,
}

/// Online meta-training.
///
/// Each meta-iteration adapts every task of a meta-batch from θ0 for `K`
/// steps, accumulating `g_φ` at every step and `g_θ0` from the prior, then
/// takes one outer step on φ (rate β) and, when λ > 0, on θ0 (rate λβ).
#[derive(Clone, Debug)]
pub struct OnlineTrainer {
    pub config: TrainConfig,
    pub partition: ParameterPartition,
    pub state: OnlineTrainerState,
}

impl OnlineTrainer {
    pub fn new(config: TrainConfig, params: ParamStore, partition: ParameterPartition) -> Result<Self> {
        config.validate()?;
        partition.validate(&params)?;
        let phi_optimizer = OuterOptimizer::new(config.optimizer, config.beta)?;
        let theta0_optimizer = OuterOptimizer::new(config.optimizer, config.lambda * config.beta)?;
        Ok(Self {
            config,
            partition,
            state: OnlineTrainerState {
                params,
                phi_optimizer,
                theta0_optimizer,
                meta_step: 0,
            },
        })
    }

    pub fn from_state(config: TrainConfig, partition: ParameterPartition, state: OnlineTrainerState) -> Result<Self> {
        config.validate()?;
        partition.validate(&state.params)?;
        Ok(Self { config, partition, state })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    /// Adapts the meta-batch and returns the summed accumulators, merged in task order.
    pub fn meta_gradient<S: TaskSource>(&self, source: &S) -> Result<(MetaGradient, Vec<TaskReport>)> {
        let step = self.state.meta_step;
        let runs = for_each_task(self.config.threads, self.config.meta_batch, |task| {
            let mut episode = source.episode(step, task)?;
            adapt(
                &self.config,
                &self.state.params,
                &self.partition,
                &mut episode,
                step,
                task,
                Mode::Online,
            )
        })?;
        let mut total = MetaGradient::new();
        let mut reports = Vec::with_capacity(runs.len());
        for (task, run) in runs.into_iter().enumerate() {
            total.merge(&run.grads)?;
            reports.push(TaskReport {
                task,
                task_losses: run.task_losses,
                meta_losses: run.meta_losses,
                leap_degenerate: run.leap_degenerate,
            });
        }
        Ok((total, reports))
    }

    /// One meta-iteration.
    pub fn step<S: TaskSource>(&mut self, source: &S) -> Result<MetaStepReport> {
        let (grads, tasks) = self.meta_gradient(source)?;
        let (g_phi, g_theta0) = grads.average();
        let phi_updated = !self.partition.warp_ids.is_empty() && grads.phi_count > 0;
        if phi_updated {
            self.state.phi_optimizer.step(&mut self.state.params, &g_phi)?;
        }
        let theta0_updated = self.config.lambda > 0.0 && grads.theta0_count > 0;
        if theta0_updated {
            self.state.theta0_optimizer.step(&mut self.state.params, &g_theta0)?;
        }
        let report = MetaStepReport {
            meta_step: self.state.meta_step,
            tasks,
            phi_updated,
            theta0_updated,
            phi_grad_norm: g_phi.norm(),
        };
        self.state.meta_step += 1;
        Ok(report)
    }

    /// Runs until `config.meta_steps` meta-iterations are complete, calling
    /// `on_step` after each.
    pub fn run<S, F>(&mut self, source: &S, mut on_step: F) -> Result<()>
    where
        S: TaskSource,
        F: FnMut(&Self, &MetaStepReport) -> Result<()>,
    {
        while self.state.meta_step < self.config.meta_steps {
            let report = self.step(source)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}
