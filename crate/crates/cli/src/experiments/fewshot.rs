//! Few-shot sine regression: warped MAML against plain MAML.

use serde::{Deserialize, Serialize};
use warpgrad_core::autodiff::ParamStore;
use warpgrad_core::meta::SampleObjectives;
use warpgrad_core::network::{
    build_network, mlp_architecture, Activation, BatchObjective, WarpKind, WarpedNetwork,
};
use warpgrad_core::objective::Objective;
use warpgrad_core::tasks::{sample_fewshot_sine_task, split_rng, stream_id, FewshotEpisode};
use warpgrad_core::train::{Episode, Prior, TaskSource, TrainConfig};

use crate::error::{config_err, Result};

pub const TASK_STREAM: u8 = 0xF0;
const EVAL_STREAM: u8 = 0xFE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotProtocol {
    pub hidden: Vec<usize>,
    /// Training points per task.
    pub shots: usize,
    /// Held-out points per task.
    pub test_size: usize,
    pub eval_tasks: usize,
    /// Meta-steps between evaluations (the first and last step are always evaluated).
    pub eval_every: usize,
}

impl Default for FewshotProtocol {
    fn default() -> Self {
        Self {
            hidden: vec![40, 40],
            shots: 10,
            test_size: 10,
            eval_tasks: 100,
            eval_every: 50,
        }
    }
}

impl FewshotProtocol {
    pub fn validate(&self, train: &TrainConfig) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(config_err("hidden needs at least one positive width"));
        }
        if self.shots == 0 || self.test_size == 0 || self.eval_tasks == 0 || self.eval_every == 0 {
            return Err(config_err("few-shot sizes must be positive"));
        }
        if train.prior != Prior::Maml {
            return Err(config_err("the few-shot experiment trains the initialisation with the MAML prior"));
        }
        Ok(())
    }

    /// Task-learner with a linear warp after every hidden non-linearity, and its
    /// warp-free twin (the warps frozen at the identity).
    pub fn networks(&self, seed: u64) -> Result<[(WarpedNetwork, ParamStore); 2]> {
        let warped = build_network(
            &mlp_architecture(1, &self.hidden, 1, Activation::Relu, Some(&WarpKind::Linear)),
            seed,
        )?;
        let plain_net = warped.0.unwarped();
        let mut plain_store = ParamStore::new();
        for id in &warped.0.partition().task_ids {
            plain_store.insert(id.clone(), warpgrad_core::autodiff::Role::Task, warped.1.get(id)?.clone())?;
        }
        Ok([warped, (plain_net, plain_store)])
    }
}

pub struct FewshotSource<'n> {
    pub net: &'n WarpedNetwork,
    pub seed: u64,
    pub shots: usize,
    pub test_size: usize,
}

pub struct FewshotTask<'n> {
    net: &'n WarpedNetwork,
    episode: FewshotEpisode,
}

pub struct FewshotData<'n> {
    train: BatchObjective<'n>,
    test: BatchObjective<'n>,
}

impl SampleObjectives for FewshotData<'_> {
    fn task(&self) -> &dyn Objective {
        &self.train
    }

    fn meta(&self) -> &dyn Objective {
        &self.test
    }
}

impl<'n> TaskSource for FewshotSource<'n> {
    type Episode = FewshotTask<'n>;

    fn episode(&self, meta_step: usize, task_index: usize) -> warpgrad_core::Result<FewshotTask<'n>> {
        let mut rng = split_rng(self.seed, stream_id(TASK_STREAM, meta_step as u64, task_index as u64));
        Ok(FewshotTask {
            net: self.net,
            episode: sample_fewshot_sine_task(&mut rng, self.shots, self.test_size)?,
        })
    }
}

impl<'n> Episode for FewshotTask<'n> {
    type Data = FewshotData<'n>;

    fn step_data(&mut self, _k: usize) -> warpgrad_core::Result<FewshotData<'n>> {
        Ok(FewshotData {
            train: self.net.batch_objective(self.episode.train.clone()),
            test: self.net.batch_objective(self.episode.test.clone()),
        })
    }
}

/// Mean test loss after `k` inner steps over the held-out tasks.
pub fn evaluate(
    net: &WarpedNetwork,
    params: &ParamStore,
    protocol: &FewshotProtocol,
    alpha: f64,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let mut sum = 0.0;
    for e in 0..protocol.eval_tasks {
        let mut rng = split_rng(seed, stream_id(EVAL_STREAM, e as u64, 0));
        let ep = sample_fewshot_sine_task(&mut rng, protocol.shots, protocol.test_size)?;
        let mut store = params.clone();
        for _ in 0..k {
            store = net.inner_sgd_step(&store, &ep.train, alpha)?;
        }
        sum += net.evaluate(&store, &ep.test)?;
    }
    Ok(sum / protocol.eval_tasks as f64)
}

