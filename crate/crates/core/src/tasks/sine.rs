//! Sine regression tasks: continual (mixture over five sub-intervals) and few-shot.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::network::Batch;

use super::rng::StreamRng;

/// Number of sub-intervals of `[−5, 5]`.
pub const SUBTASKS: usize = 5;

/// Bounds of sub-interval `t` (1-based): `[−5 + 2(t−1), −3 + 2(t−1)]`.
///
/// Sub-intervals are half-open `[lo, hi)` except the last, which is closed at 5.
pub fn subinterval(t: usize) -> Result<(f64, f64)> {
    if !(1..=SUBTASKS).contains(&t) {
        return Err(invalid(format!("sub-task index must be in 1..={SUBTASKS}, got {t}")));
    }
    let lo = -5.0 + 2.0 * (t - 1) as f64;
    Ok((lo, lo + 2.0))
}

/// Sub-task whose interval contains `x`, if `x ∈ [−5, 5]`.
pub fn subinterval_of(x: f64) -> Option<usize> {
    if !(-5.0..=5.0).contains(&x) {
        return None;
    }
    Some((((x + 5.0) / 2.0).floor() as usize + 1).min(SUBTASKS))
}

/// Target `g(x) = σ(x + o)·a1 sin(x − b1) + (1 − σ(x + o))·a2 sin(x − b2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualSineTask {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub o: f64,
}

/// Mini-batch drawn from one sub-task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtaskBatch {
    pub subtask: usize,
    pub batch: Batch,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ContinualSineTask {
    /// Amplitudes in `[0.1, 5]`, phases in `[0, π]`, offset in `[−5, 5]`.
    pub fn sample(rng: &mut StreamRng) -> Self {
        Self {
            a1: rng.gen_range(0.1..=5.0),
            b1: rng.gen_range(0.0..=PI),
            a2: rng.gen_range(0.1..=5.0),
            b2: rng.gen_range(0.0..=PI),
            o: rng.gen_range(-5.0..=5.0),
        }
    }

    pub fn target(&self, x: f64) -> f64 {
        let w = sigmoid(x + self.o);
        w * self.a1 * (x - self.b1).sin() + (1.0 - w) * self.a2 * (x - self.b2).sin()
    }

    /// `n` inputs uniform on sub-interval `t` with their targets.
    pub fn minibatch(&self, t: usize, n: usize, rng: &mut StreamRng) -> Result<SubtaskBatch> {
        let (lo, hi) = subinterval(t)?;
        if n == 0 {
            return Err(invalid("a mini-batch needs at least one sample"));
        }
        let xs: Vec<f64> = (0..n)
            .map(|_| if t == SUBTASKS { rng.gen_range(lo..=hi) } else { rng.gen_range(lo..hi) })
            .collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.target(x)).collect();
        Ok(SubtaskBatch {
            subtask: t,
            batch: Batch::from_pairs(&xs, &ys)?,
        })
    }
}

/// `y = amplitude · sin(x − phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotSineTask {
    pub amplitude: f64,
    pub phase: f64,
}

impl FewshotSineTask {
    pub fn sample(rng: &mut StreamRng) -> Self {
        Self {
            amplitude: rng.gen_range(0.1..=5.0),
            phase: rng.gen_range(0.0..=PI),
        }
    }

    pub fn target(&self, x: f64) -> f64 {
        self.amplitude * (x - self.phase).sin()
    }

    /// `n` inputs uniform on `[−5, 5]`.
    pub fn batch(&self, n: usize, rng: &mut StreamRng) -> Result<Batch> {
        if n == 0 {
            return Err(invalid("a mini-batch needs at least one sample"));
        }
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..=5.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| self.target(x)).collect();
        Batch::from_pairs(&xs, &ys)
    }
}

/// A few-shot task with independently drawn train and test batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotEpisode {
    pub task: FewshotSineTask,
    pub train: Batch,
    pub test: Batch,
}

pub fn sample_fewshot_sine_task(rng: &mut StreamRng, shots: usize, test_size: usize) -> Result<FewshotEpisode> {
    let task = FewshotSineTask::sample(rng);
    let train = task.batch(shots, rng)?;
    let test = task.batch(test_size, rng)?;
    Ok(FewshotEpisode { task, train, test })
}

impl SubtaskBatch {
    pub fn inputs(&self) -> &Tensor {
        &self.batch.inputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::rng::split_rng;

    #[test]
    fn intervals_partition_the_domain() {
        let mut prev_hi = -5.0;
        for t in 1..=SUBTASKS {
            let (lo, hi) = subinterval(t).unwrap();
            assert_eq!(lo, prev_hi);
            assert_eq!(hi - lo, 2.0);
            prev_hi = hi;
        }
        assert_eq!(prev_hi, 5.0);
        assert!(subinterval(0).is_err());
        assert!(subinterval(6).is_err());
        assert_eq!(subinterval_of(-5.0), Some(1));
        assert_eq!(subinterval_of(-3.0), Some(2));
        assert_eq!(subinterval_of(5.0), Some(5));
        assert_eq!(subinterval_of(5.1), None);
    }

    #[test]
    fn mixture_collapses_for_equal_components() {
        let t = ContinualSineTask { a1: 2.0, b1: 0.5, a2: 2.0, b2: 0.5, o: 1.3 };
        for x in [-4.0, -0.2, 3.3] {
            assert!((t.target(x) - 2.0 * (x - 0.5).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn mixture_is_even_at_minus_offset() {
        let t = ContinualSineTask { a1: 1.0, b1: 0.2, a2: 3.0, b2: 1.1, o: 2.0 };
        let x = -2.0;
        let expected = (1.0 * (x - 0.2f64).sin() + 3.0 * (x - 1.1f64).sin()) / 2.0;
        assert!((t.target(x) - expected).abs() < 1e-15);
    }

    #[test]
    fn minibatches_stay_in_their_interval() {
        let mut rng = split_rng(1, 2);
        let task = ContinualSineTask::sample(&mut rng);
        let b = task.minibatch(1, 5, &mut rng).unwrap();
        assert_eq!(b.batch.len(), 5);
        assert!(b.inputs().data().iter().all(|x| (-5.0..=-3.0).contains(x)));
        let b = task.minibatch(3, 50, &mut rng).unwrap();
        assert!(b.inputs().data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(task.minibatch(0, 5, &mut rng).is_err());
    }

    #[test]
    fn fewshot_episode() {
        let mut rng = split_rng(3, 0);
        let e = sample_fewshot_sine_task(&mut rng, 5, 10).unwrap();
        assert_eq!(e.train.len(), 5);
        assert_eq!(e.test.len(), 10);
        assert_ne!(e.train.inputs.data(), &e.test.inputs.data()[..5]);
        assert!(e.test.targets.data().iter().all(|y| y.abs() <= e.task.amplitude));
    }
}
