//! Leap: cumulative chordal length of the extended trajectory `ϑ_k = (θ_k, L(θ_k))`.

use crate::autodiff::GradMap;
use crate::error::{invalid, Result};

/// One point of an extended trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedPoint {
    pub theta: GradMap,
    pub loss: f64,
}

fn chord(prev: &ExtendedPoint, next: &ExtendedPoint) -> Result<(GradMap, f64, f64)> {
    if prev.theta.ids() != next.theta.ids() {
        return Err(invalid("trajectory points have different slots"));
    }
    let mut delta = next.theta.clone();
    delta.accumulate(&prev.theta, -1.0)?;
    let dl = next.loss - prev.loss;
    let dist = (delta.dot(&delta) + dl * dl).sqrt();
    Ok((delta, dl, dist))
}

/// `Σ_k ‖ϑ_k − ϑ_{k−1}‖₂`.
pub fn leap_objective(trajectory: &[ExtendedPoint]) -> Result<f64> {
    if trajectory.len() < 2 {
        return Err(invalid("a Leap trajectory needs at least two points"));
    }
    let mut total = 0.0;
    for pair in trajectory.windows(2) {
        total += chord(&pair[0], &pair[1])?.2;
    }
    Ok(total)
}

/// Leap meta-gradient, accumulated one step at a time.
///
/// Each step adds `−(ΔL·∇L(θ_{k−1}) + Δθ_k) / ‖ϑ_k − ϑ_{k−1}‖`. Steps of zero
/// chordal length are skipped and counted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LeapAccumulator {
    prev: Option<(ExtendedPoint, GradMap)>,
    pub grad: GradMap,
    pub value: f64,
    pub degenerate: usize,
    pub steps: usize,
}

impl LeapAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds point `ϑ_k` together with `∇L(θ_k)` (needed when `ϑ_k` becomes the tail of the next chord).
    pub fn push(&mut self, point: ExtendedPoint, grad_at_point: GradMap) -> Result<()> {
        if let Some((prev, prev_grad)) = &self.prev {
            let (delta, dl, dist) = chord(prev, &point)?;
            self.steps += 1;
            if dist == 0.0 {
                self.degenerate += 1;
            } else {
                self.value += dist;
                let mut term = delta;
                term.accumulate(prev_grad, dl)?;
                self.grad.accumulate(&term, -1.0 / dist)?;
            }
        }
        self.prev = Some((point, grad_at_point));
        Ok(())
    }
}

/// Gradient of the Leap objective over θ0 for a recorded trajectory.
///
/// `grads[k]` is `∇L(θ_k)`; only the first `len − 1` entries are used.
pub fn leap_meta_gradient(trajectory: &[ExtendedPoint], grads: &[GradMap]) -> Result<LeapAccumulator> {
    if trajectory.len() < 2 {
        return Err(invalid("a Leap trajectory needs at least two points"));
    }
    if grads.len() + 1 < trajectory.len() {
        return Err(invalid("one loss gradient is needed per trajectory step"));
    }
    let mut acc = LeapAccumulator::new();
    for (k, point) in trajectory.iter().enumerate() {
        let g = grads.get(k).cloned().unwrap_or_default();
        acc.push(point.clone(), g)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn pt(theta: &[f64], loss: f64) -> ExtendedPoint {
        ExtendedPoint {
            theta: GradMap::from_pairs(&["w".to_string()], vec![Tensor::row(theta)]),
            loss,
        }
    }

    #[test]
    fn objective_values() {
        assert_eq!(leap_objective(&[pt(&[1.0, 2.0], 0.5), pt(&[1.0, 2.0], 0.5)]).unwrap(), 0.0);
        assert!((leap_objective(&[pt(&[0.0], 1.0), pt(&[0.0], 1.3)]).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(leap_objective(&[pt(&[0.0, 0.0], 5.0), pt(&[3.0, 0.0], 1.0)]).unwrap(), 5.0);
        assert!(leap_objective(&[pt(&[0.0], 1.0)]).is_err());
    }

    #[test]
    fn pure_loss_drop_returns_the_loss_gradient() {
        let g = GradMap::from_pairs(&["w".to_string()], vec![Tensor::row(&[0.25, -4.0])]);
        let acc = leap_meta_gradient(&[pt(&[1.0, 1.0], 2.0), pt(&[1.0, 1.0], 1.5)], &[g.clone()]).unwrap();
        assert_eq!(acc.grad, g);
        assert_eq!(acc.degenerate, 0);
    }

    #[test]
    fn degenerate_steps_are_counted() {
        let g = GradMap::from_pairs(&["w".to_string()], vec![Tensor::row(&[1.0])]);
        let acc = leap_meta_gradient(&[pt(&[1.0], 2.0), pt(&[1.0], 2.0)], &[g]).unwrap();
        assert_eq!(acc.degenerate, 1);
        assert!(acc.grad.is_empty());
        assert_eq!(acc.value, 0.0);
    }
}
