//! Random 2-D loss surfaces with shared structure.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::objective::PointLoss;

use super::rng::StreamRng;

/// One surface `f(x1, x2)` of the family
///
/// ```text
/// f = b1(a1 − x1)² exp(−x1² − (x2 + a2)²)
///   − b2(x1/s − x1³ − x2⁵) exp(−x1² − x2²)
///   − b3 exp(−(x1 + a3)² − x1²)
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Surface2DTask {
    pub a: [i32; 3],
    pub b: [i32; 3],
    pub s: i32,
}

pub fn sample_surface_task(rng: &mut StreamRng) -> Surface2DTask {
    let mut a = [0; 3];
    let mut b = [0; 3];
    for v in &mut a {
        *v = rng.gen_range(-1..=1);
    }
    for v in &mut b {
        *v = rng.gen_range(-5..=5);
    }
    let s = rng.gen_range(1..=10);
    Surface2DTask { a, b, s }
}

/// Initial point with both coordinates drawn from `U(−3, 3)`.
pub fn init_surface_point(rng: &mut StreamRng) -> [f64; 2] {
    [rng.gen_range(-3.0..=3.0), rng.gen_range(-3.0..=3.0)]
}

impl Surface2DTask {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a.iter().all(|v| (-1..=1).contains(v))
            && self.b.iter().all(|v| (-5..=5).contains(v))
            && (1..=10).contains(&self.s);
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("surface parameters out of range: {self:?}")))
        }
    }

    /// Direct evaluation on plain floats.
    pub fn value(&self, x1: f64, x2: f64) -> f64 {
        let [a1, a2, a3] = self.a.map(f64::from);
        let [b1, b2, b3] = self.b.map(f64::from);
        let s = f64::from(self.s);
        b1 * (a1 - x1).powi(2) * (-x1 * x1 - (x2 + a2).powi(2)).exp()
            - b2 * (x1 / s - x1.powi(3) - x2.powi(5)) * (-x1 * x1 - x2 * x2).exp()
            - b3 * (-(x1 + a3).powi(2) - x1 * x1).exp()
    }
}

impl PointLoss for Surface2DTask {
    /// `point` is a `[1, 2]` row `(x1, x2)`.
    fn eval<'g>(&self, _graph: &'g Graph, point: Var<'g>) -> Result<Var<'g>> {
        if point.shape().iter().product::<usize>() != 2 {
            return Err(invalid(format!("surface loss needs a 2-D point, got {:?}", point.shape())));
        }
        let [a1, a2, a3] = self.a.map(f64::from);
        let [b1, b2, b3] = self.b.map(f64::from);
        let s = f64::from(self.s);
        let x1 = point.index(0)?;
        let x2 = point.index(1)?;
        let x1sq = x1.square()?;
        let x2sq = x2.square()?;

        let t1 = x1
            .neg()?
            .add_scalar(a1)?
            .square()?
            .mul(&x1sq.add(&x2.add_scalar(a2)?.square()?)?.neg()?.exp()?)?
            .scale(b1)?;

        let x1cube = x1sq.mul(&x1)?;
        let x2five = x2sq.square()?.mul(&x2)?;
        let poly = x1.scale(1.0 / s)?.sub(&x1cube)?.sub(&x2five)?;
        let t2 = poly.mul(&x1sq.add(&x2sq)?.neg()?.exp()?)?.scale(b2)?;

        let t3 = x1.add_scalar(a3)?.square()?.add(&x1sq)?.neg()?.exp()?.scale(b3)?;

        t1.sub(&t2)?.sub(&t3)
    }
}
