//! Central-difference verification of analytic gradients.

use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares analytic gradients against central differences over every entry
/// of every tensor in `ids`.
///
/// `loss` returns the scalar value and the analytic gradients at the current
/// parameter values. Tensors missing from the analytic gradients are taken to
/// have zero gradient, so a disconnected tensor that does affect the loss is
/// reported as an error. Returns
/// `max |analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], step: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, ParamGrads)>,
{
    let (base, analytic) = loss(store)?;
    if !base.is_finite() {
        return Err(Error::numeric("loss is not finite at the test point"));
    }
    let mut worst: f64 = 0.0;
    for &id in ids {
        let n = store.get(id).len();
        let grad = analytic.get(id).map(|g| g.as_standard_layout().into_owned());
        for k in 0..n {
            let original = flat(store, id, k);
            set_flat(store, id, k, original + step);
            let (plus, _) = loss(store)?;
            set_flat(store, id, k, original - step);
            let (minus, _) = loss(store)?;
            set_flat(store, id, k, original);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "loss not finite after perturbing `{}`[{k}]",
                    store.get(id).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.as_ref().map_or(0.0, |g| g.as_slice().expect("standard layout")[k]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn flat(store: &ParamStore, id: ParamId, k: usize) -> f64 {
    store.values(id).as_slice().expect("standard layout")[k]
}

fn set_flat(store: &mut ParamStore, id: ParamId, k: usize, v: f64) {
    store.values_mut(id).as_slice_mut().expect("standard layout")[k] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::params::{Matrix, ParamGroup, ParamTensor};
    use crate::diff::tape::Tape;
    use ndarray::array;

    #[test]
    fn quadratic_has_tiny_error() {
        let mut store = ParamStore::new();
        let p = store.add(ParamTensor::new("p", ParamGroup::Free, array![[0.3, -1.7], [2.5, 0.01]]));
        let err = grad_check(&mut store, &[p], DEFAULT_STEP, |s| {
            let mut tape = Tape::new(s);
            let v = tape.param(p);
            let sq = tape.mul(v, v);
            let total = tape.sum(sq);
            let half = tape.scale(total, 0.5);
            Ok((tape.scalar(half), tape.backward(half)))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add(ParamTensor::new("p", ParamGroup::Free, array![[1.0, 2.0]]));
        let err = grad_check(&mut store, &[p], DEFAULT_STEP, |_| Ok((4.2, ParamGrads::default()))).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn missing_gradient_is_detected() {
        let mut store = ParamStore::new();
        let p = store.add(ParamTensor::new("p", ParamGroup::Free, array![[1.0]]));
        let err = grad_check(&mut store, &[p], DEFAULT_STEP, |s| {
            Ok((3.0 * s.values(p)[[0, 0]], ParamGrads::default()))
        })
        .unwrap();
        assert!((err - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let p = store.add(ParamTensor::new("p", ParamGroup::Free, Matrix::zeros((1, 1))));
        let res = grad_check(&mut store, &[p], DEFAULT_STEP, |s| {
            let x = s.values(p)[[0, 0]];
            Ok((if x > 0.0 { f64::NAN } else { 0.0 }, ParamGrads::default()))
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
