//! Central finite-difference oracle.
//!
//! The oracle only ever calls user-supplied *forward* closures, so it stays
//! independent of the backward implementation it validates. Relative error
//! uses a small absolute floor so near-zero gradient pairs compare sanely.

use super::params::{EntryId, ParamStore};

/// |a - b| / max(|a|, |b|, floor)
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient of `f` w.r.t. one store entry.
pub fn grad_fd_entry(
    store: &mut ParamStore,
    entry: EntryId,
    mut f: impl FnMut(&ParamStore) -> f64,
    step: f64,
) -> Vec<f64> {
    let n = store.entry(entry).len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.entry(entry).values[i];
        store.entry_mut(entry).values[i] = orig + step;
        let hi = f(store);
        store.entry_mut(entry).values[i] = orig - step;
        let lo = f(store);
        store.entry_mut(entry).values[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Maximum relative error between the gradients already accumulated in the
/// store and central finite differences of `f`, over the given entries.
pub fn max_grad_error(
    store: &mut ParamStore,
    entries: &[EntryId],
    mut f: impl FnMut(&ParamStore) -> f64,
    step: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &id in entries {
        let analytic = store.grads(id).to_vec();
        let numeric = grad_fd_entry(store, id, &mut f, step);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n, 1e-6));
        }
    }
    worst
}

/// Central-difference gradient of a scalar function of a plain vector.
pub fn grad_fd_vec(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let hi = f(&xs);
        xs[i] = orig - step;
        let lo = f(&xs);
        xs[i] = orig;
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic_is_linear() {
        let g = grad_fd_vec(|x| x.iter().map(|v| v * v).sum(), &[1.0, -2.0, 0.5], 1e-5);
        for (gi, xi) in g.iter().zip(&[1.0, -2.0, 0.5]) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(1e-12, 0.0, 1e-6) < 1e-5);
        assert!((rel_err(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-12);
    }
}
