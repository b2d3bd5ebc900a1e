//! Central finite differences, used as an independent gradient oracle.

use super::params::{GradMap, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Central-difference gradient of `f` with respect to the `ids` slots of `params`.
///
/// Each coordinate costs two evaluations of `f`.
pub fn finite_diff_gradient<F>(
    mut f: F,
    params: &ParamStore,
    ids: &[String],
    eps: f64,
) -> Result<GradMap>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut work = params.clone();
    let mut out = GradMap::new();
    for id in ids {
        let base = params.get(id)?.clone();
        let mut grad = vec![0.0; base.numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                work.set(id, t)?;
                let v = f(&work);
                match v {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(_) | Err(Error::NonFinite { .. }) => Err(Error::NonFiniteObjective {
                        slot: id.clone(),
                        coordinate: i,
                    }),
                    Err(e) => Err(e),
                }
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            *slot = (plus - minus) / (2.0 * eps);
        }
        work.set(id, base.clone())?;
        out.insert(id.clone(), Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Largest coordinate error relative to the larger of the two gradients' scales:
/// `max_i |a_i − b_i| / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let scale = a
        .iter()
        .chain(b)
        .fold(floor, |m, v| m.max(v.abs()));
    let worst = a
        .iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    worst / scale
}

/// [`relative_error`] between two gradient maps over their common slots.
pub fn grad_map_relative_error(a: &GradMap, b: &GradMap) -> f64 {
    let ids = a.ids();
    let fa: Vec<f64> = ids.iter().flat_map(|id| a.get(id).unwrap().data().to_vec()).collect();
    let fb: Vec<f64> = ids
        .iter()
        .flat_map(|id| b.get(id).expect("slot missing from second map").data().to_vec())
        .collect();
    relative_error(&fa, &fb, 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Role;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Role::Task, Tensor::row(v)).unwrap();
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let s = store(&[2.0]);
        let ids = vec!["x".to_string()];
        let g = finite_diff_gradient(|p| Ok(p.get("x")?.data()[0].powi(2)), &s, &ids, 1e-4).unwrap();
        assert!((g.get("x").unwrap().data()[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let s = store(&[1.0, -3.0, 7.0]);
        let ids = vec!["x".to_string()];
        let g = finite_diff_gradient(|_| Ok(5.0), &s, &ids, 1e-5).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_objectives() {
        let s = store(&[1.0]);
        let ids = vec!["x".to_string()];
        assert!(finite_diff_gradient(|_| Ok(0.0), &s, &ids, 0.0).is_err());
        let err = finite_diff_gradient(|_| Ok(f64::NAN), &s, &ids, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteObjective { coordinate: 0, .. }));
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0], 1e-12), 0.0);
        let e = relative_error(&[100.0, 0.0], &[100.0, 1e-3], 1e-12);
        assert!((e - 1e-5).abs() < 1e-18);
    }
}
