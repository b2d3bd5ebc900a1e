//! Continual meta-training over a stream of experience.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamStore};
use crate::error::{Error, Result};
use crate::meta::{warp_step, MetaGradient, SampleObjectives};
use crate::network::ParameterPartition;

use super::{OuterOptimizer, TrainConfig};

/// An endless supply of task mini-batches.
pub trait ExperienceStream {
    type Data: SampleObjectives;

    /// The mini-batch of tasks for stream step `step`.
    fn next_batch(&mut self, step: usize) -> Result<Vec<Self::Data>>;
}

/// Outcome of one stream step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStepReport {
    pub step: usize,
    pub mean_task_loss: f64,
    pub mean_meta_loss: f64,
    pub phi_updated: bool,
}

/// Resumable state of [`ContinualTrainer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualTrainerState {
    pub params: ParamStore,
    pub phi_optimizer: OuterOptimizer,
    /// Pending warp meta-gradient.
    pub g_phi: MetaGradient,
    /// Steps since the last warp update.
    pub i: usize,
    pub steps: usize,
    pub phi_updates: usize,
}

/// Continual meta-training.
///
/// Every step moves the shared task parameters θ by `λβ·g_θ` (the averaged task
/// gradient of the batch) and adds the batch's warp meta-gradients to `g_φ`.
/// Every `η`-th step applies the accumulated `g_φ` and clears it.
#[derive(Clone, Debug)]
pub struct ContinualTrainer {
    pub config: TrainConfig,
    pub partition: ParameterPartition,
    pub state: ContinualTrainerState,
}

impl ContinualTrainer {
    pub fn new(config: TrainConfig, params: ParamStore, partition: ParameterPartition) -> Result<Self> {
        config.validate()?;
        partition.validate(&params)?;
        let phi_optimizer = OuterOptimizer::new(config.optimizer, config.beta)?;
        Ok(Self {
            config,
            partition,
            state: ContinualTrainerState {
                params,
                phi_optimizer,
                g_phi: MetaGradient::new(),
                i: 0,
                steps: 0,
                phi_updates: 0,
            },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn step<S: ExperienceStream>(&mut self, stream: &mut S) -> Result<StreamStepReport> {
        let step = self.state.steps;
        let batch = stream.next_batch(step)?;
        let mut g_theta = GradMap::new();
        let (mut task_sum, mut meta_sum) = (0.0, 0.0);
        for (task, data) in batch.iter().enumerate() {
            let ws = warp_step(
                &self.state.params,
                &self.partition,
                data.task(),
                data.meta(),
                self.config.alpha,
                self.config.objective,
            )
            .map_err(|e| Error::Diverged {
                meta_step: step,
                task,
                step,
                reason: e.to_string(),
            })?;
            self.state.g_phi.add_phi(&ws.meta_grad)?;
            g_theta.accumulate(&ws.task_grad, 1.0)?;
            task_sum += ws.task_loss;
            meta_sum += ws.meta_loss;
        }
        let n = batch.len().max(1) as f64;
        self.state
            .params
            .add_scaled(&g_theta, -self.config.lambda * self.config.beta / n)?;
        self.state.i += 1;
        let mut phi_updated = false;
        if self.state.i == self.config.eta {
            let (g_phi, _) = self.state.g_phi.average();
            if !self.partition.warp_ids.is_empty() {
                self.state.phi_optimizer.step(&mut self.state.params, &g_phi)?;
            }
            self.state.phi_updates += 1;
            self.state.i = 0;
            self.state.g_phi.reset_phi();
            phi_updated = true;
        }
        self.state.steps += 1;
        Ok(StreamStepReport {
            step,
            mean_task_loss: task_sum / n,
            mean_meta_loss: meta_sum / n,
            phi_updated,
        })
    }

    /// Runs `config.meta_steps` stream steps.
    pub fn run<S: ExperienceStream>(&mut self, stream: &mut S) -> Result<Vec<StreamStepReport>> {
        let mut out = Vec::new();
        while self.state.steps < self.config.meta_steps {
            out.push(self.step(stream)?);
        }
        Ok(out)
    }
}
