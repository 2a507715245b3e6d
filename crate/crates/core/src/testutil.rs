//! Finite-difference helpers for gradient tests.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) const FD_STEP: f64 = 1e-6;

/// Central difference of `f` with respect to entry `k` of parameter `id`.
pub(crate) fn fd_param(store: &mut ParamStore, id: ParamId, k: usize, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
    let orig = store.value(id).data()[k];
    store.value_mut(id).data_mut()[k] = orig + FD_STEP;
    let up = f(store);
    store.value_mut(id).data_mut()[k] = orig - FD_STEP;
    let down = f(store);
    store.value_mut(id).data_mut()[k] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Relative error with an absolute floor so tiny gradients are not judged
/// on rounding noise.
pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares `analytic` against finite differences on the given entries.
pub(crate) fn assert_param_grad(
    store: &mut ParamStore,
    id: ParamId,
    analytic: Option<&Tensor>,
    entries: &[usize],
    f: &dyn Fn(&ParamStore) -> f64,
    tol: f64,
) {
    let name = store.get(id).name.clone();
    for &k in entries {
        let a = analytic.map_or(0.0, |g| g.data()[k]);
        let n = fd_param(store, id, k, f);
        let e = rel_err(a, n);
        assert!(e <= tol, "{name}[{k}]: analytic {a:e} numeric {n:e} rel {e:e}");
    }
}
