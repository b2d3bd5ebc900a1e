//! Replay buffer of task-parameter trajectories.

use rand::seq::SliceRandom;

use crate::autodiff::GradMap;
use crate::error::{invalid, Result};
use crate::meta::TrajectorySample;
use crate::tasks::StreamRng;

#[derive(Clone, Debug)]
struct TaskTrajectory<D> {
    snapshots: Vec<GradMap>,
    samples: Vec<TrajectorySample<D>>,
    leap_terms: Vec<GradMap>,
}

/// Per-task trajectories `θ_0 … θ_K`; the first `K` are eligible meta samples.
#[derive(Clone, Debug)]
pub struct ReplayBuffer<D> {
    tasks: Vec<TaskTrajectory<D>>,
}

impl<D> Default for ReplayBuffer<D> {
    fn default() -> Self {
        Self { tasks: Vec::new() }
    }
}

impl<D> ReplayBuffer<D> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one task's trajectory: `K + 1` snapshots and `K` samples (plus,
    /// optionally, one Leap term per sample).
    pub fn push_task(
        &mut self,
        snapshots: Vec<GradMap>,
        samples: Vec<TrajectorySample<D>>,
        leap_terms: Vec<GradMap>,
    ) -> Result<()> {
        if snapshots.len() != samples.len() + 1 {
            return Err(invalid(format!(
                "a trajectory of {} samples needs {} snapshots, got {}",
                samples.len(),
                samples.len() + 1,
                snapshots.len()
            )));
        }
        if !leap_terms.is_empty() && leap_terms.len() != samples.len() {
            return Err(invalid("one Leap term is needed per sample"));
        }
        if samples.iter().enumerate().any(|(k, s)| s.step != k) {
            return Err(invalid("trajectory samples must be in step order"));
        }
        self.tasks.push(TaskTrajectory {
            snapshots,
            samples,
            leap_terms,
        });
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Stored snapshots of task `task` (`K + 1`).
    pub fn entries(&self, task: usize) -> usize {
        self.tasks.get(task).map_or(0, |t| t.snapshots.len())
    }

    /// Eligible meta samples of task `task` (`K`).
    pub fn eligible(&self, task: usize) -> usize {
        self.tasks.get(task).map_or(0, |t| t.samples.len())
    }

    pub fn total_entries(&self) -> usize {
        self.tasks.iter().map(|t| t.snapshots.len()).sum()
    }

    pub fn total_eligible(&self) -> usize {
        self.tasks.iter().map(|t| t.samples.len()).sum()
    }

    pub fn sample(&self, task: usize, step: usize) -> Option<&TrajectorySample<D>> {
        self.tasks.get(task)?.samples.get(step)
    }

    pub fn snapshot(&self, task: usize, step: usize) -> Option<&GradMap> {
        self.tasks.get(task)?.snapshots.get(step)
    }

    pub fn leap_term(&self, task: usize, step: usize) -> Option<&GradMap> {
        self.tasks.get(task)?.leap_terms.get(step)
    }

    /// Every eligible `(task, step)` once, in a random order.
    pub fn sweep_order(&self, rng: &mut StreamRng) -> Vec<(usize, usize)> {
        let mut order: Vec<(usize, usize)> = self
            .tasks
            .iter()
            .enumerate()
            .flat_map(|(t, traj)| (0..traj.samples.len()).map(move |k| (t, k)))
            .collect();
        order.shuffle(rng);
        order
    }
}
