//! Offline meta-training: collect trajectories, then sweep a replay buffer.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{invalid, Error, Result};
use crate::meta::{warp_step, MetaGradient, SampleObjectives};
use crate::network::ParameterPartition;
use crate::tasks::{split_rng, stream_id};

use super::{adapt, for_each_task, Episode, Mode, OuterOptimizer, Prior, ReplayBuffer, TaskSource, TrainConfig};

/// Outcome of one collect-and-sweep round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub collection: usize,
    pub entries: usize,
    pub eligible: usize,
    pub samples_visited: usize,
    pub updates: usize,
    pub mean_meta_loss: f64,
}

/// Resumable state of [`OfflineTrainer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineTrainerState {
    pub params: ParamStore,
    pub phi_optimizer: OuterOptimizer,
    pub theta0_optimizer: OuterOptimizer,
    /// Collect-and-sweep rounds completed.
    pub collections: usize,
    /// Warp updates applied so far.
    pub updates: usize,
}

/// Offline meta-training with a replay buffer.
///
/// Each round adapts a meta-batch with φ frozen, stores `K + 1` snapshots per
/// task, then visits the `K` eligible samples of every task once in a seeded
/// random order, updating after every `η` samples. Samples left over at the
/// end of a sweep are dropped. Training stops once `config.meta_steps` warp
/// updates have been applied.
#[derive(Clone, Debug)]
pub struct OfflineTrainer {
    pub config: TrainConfig,
    pub partition: ParameterPartition,
    pub state: OfflineTrainerState,
}

impl OfflineTrainer {
    pub fn new(config: TrainConfig, params: ParamStore, partition: ParameterPartition) -> Result<Self> {
        config.validate()?;
        if config.prior == Prior::Maml {
            return Err(invalid("the MAML prior needs the full unroll and is only supported online"));
        }
        partition.validate(&params)?;
        let phi_optimizer = OuterOptimizer::new(config.optimizer, config.beta)?;
        let theta0_optimizer = OuterOptimizer::new(config.optimizer, config.lambda * config.beta)?;
        Ok(Self {
            config,
            partition,
            state: OfflineTrainerState {
                params,
                phi_optimizer,
                theta0_optimizer,
                collections: 0,
                updates: 0,
            },
        })
    }

    pub fn from_state(config: TrainConfig, partition: ParameterPartition, state: OfflineTrainerState) -> Result<Self> {
        config.validate()?;
        partition.validate(&state.params)?;
        Ok(Self { config, partition, state })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    /// Phase one: adapt the meta-batch of round `collection` with φ frozen.
    pub fn collect<S: TaskSource>(
        &self,
        source: &S,
    ) -> Result<ReplayBuffer<<S::Episode as Episode>::Data>> {
        let round = self.state.collections;
        let runs = for_each_task(self.config.threads, self.config.meta_batch, |task| {
            let mut episode = source.episode(round, task)?;
            adapt(
                &self.config,
                &self.state.params,
                &self.partition,
                &mut episode,
                round,
                task,
                Mode::Collect,
            )
        })?;
        let mut buffer = ReplayBuffer::new();
        for run in runs {
            buffer.push_task(run.snapshots, run.samples, run.leap_terms)?;
        }
        Ok(buffer)
    }

    /// Phase two: one sweep over `buffer`. Returns the number of updates applied.
    pub fn sweep<D: SampleObjectives>(&mut self, buffer: &ReplayBuffer<D>) -> Result<(usize, usize, f64)> {
        let round = self.state.collections;
        let mut rng = split_rng(self.config.seed, stream_id(0xB0, round as u64, 0));
        let order = buffer.sweep_order(&mut rng);
        let mut acc = MetaGradient::new();
        let mut i = 0;
        let mut updates = 0;
        let mut visited = 0;
        let mut loss_sum = 0.0;
        for (task, k) in order {
            if self.state.updates >= self.config.meta_steps {
                break;
            }
            let sample = buffer.sample(task, k).expect("order comes from the buffer");
            let params = sample.params(&self.state.params)?;
            let ws = warp_step(
                &params,
                &self.partition,
                sample.data.task(),
                sample.data.meta(),
                self.config.alpha,
                self.config.objective,
            )
            .map_err(|e| Error::Diverged {
                meta_step: self.state.updates,
                task,
                step: k,
                reason: e.to_string(),
            })?;
            if !ws.meta_grad.is_finite() {
                return Err(Error::Diverged {
                    meta_step: self.state.updates,
                    task,
                    step: k,
                    reason: "non-finite meta-gradient".into(),
                });
            }
            visited += 1;
            loss_sum += ws.meta_loss;
            acc.add_phi(&ws.meta_grad)?;
            if self.config.prior == Prior::Leap {
                if let Some(term) = buffer.leap_term(task, k) {
                    acc.add_theta0(term)?;
                }
            }
            i += 1;
            if i == self.config.eta {
                let (g_phi, g_theta0) = acc.average();
                if !self.partition.warp_ids.is_empty() {
                    self.state.phi_optimizer.step(&mut self.state.params, &g_phi)?;
                }
                if self.config.lambda > 0.0 && acc.theta0_count > 0 {
                    self.state.theta0_optimizer.step(&mut self.state.params, &g_theta0)?;
                }
                self.state.updates += 1;
                updates += 1;
                i = 0;
                acc = MetaGradient::new();
            }
        }
        let mean = if visited == 0 { 0.0 } else { loss_sum / visited as f64 };
        Ok((updates, visited, mean))
    }

    /// One collect-and-sweep round.
    pub fn step<S: TaskSource>(&mut self, source: &S) -> Result<SweepReport> {
        let buffer = self.collect(source)?;
        if buffer.total_eligible() < self.config.eta {
            return Err(invalid(format!(
                "eta = {} exceeds the {} eligible samples per sweep; no update would ever happen",
                self.config.eta,
                buffer.total_eligible()
            )));
        }
        let (updates, visited, mean_meta_loss) = self.sweep(&buffer)?;
        let report = SweepReport {
            collection: self.state.collections,
            entries: buffer.total_entries(),
            eligible: buffer.total_eligible(),
            samples_visited: visited,
            updates,
            mean_meta_loss,
        };
        self.state.collections += 1;
        Ok(report)
    }

    /// Runs rounds until `config.meta_steps` warp updates are applied.
    pub fn run<S, F>(&mut self, source: &S, mut on_round: F) -> Result<()>
    where
        S: TaskSource,
        F: FnMut(&Self, &SweepReport) -> Result<()>,
    {
        while self.state.updates < self.config.meta_steps {
            let report = self.step(source)?;
            on_round(self, &report)?;
        }
        Ok(())
    }
}
