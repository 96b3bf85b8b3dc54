//! Adam with bias correction and per-entry learning rates.

use super::params::{EntryId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// Moment buffers persist across steps; gradients are zeroed after each
/// step. The effective step size is `entry.lr * lr_scale`, where `lr_scale`
/// implements schedules (exponential decay by default in the trainers).
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.len()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.len()]).collect();
        Adam { cfg, t: 0, m, v, lr_scale: 1.0 }
    }

    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    pub fn step_index(&self) -> u64 {
        self.t
    }

    /// Reset moments for one entry (after a grid resize).
    pub fn reset_entry(&mut self, id: EntryId, len: usize) {
        self.m[id.index()] = vec![0.0; len];
        self.v[id.index()] = vec![0.0; len];
    }

    /// One Adam update over every unfrozen entry. Rejects non-finite
    /// gradients, naming the offending entry.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let ids: Vec<EntryId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let frozen = store.entry(id).frozen;
            if frozen {
                store.entry_mut(id).grads.fill(0.0);
                continue;
            }
            if let Some(bad) = store.grads(id).iter().find(|g| !g.is_finite()) {
                let _ = bad;
                return Err(Error::NonFiniteGrad(store.entry(id).name.clone()));
            }
            let lr = store.entry(id).lr * self.lr_scale;
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let e = store.entry_mut(id);
            for i in 0..e.values.len() {
                let g = e.grads[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                e.values[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            e.grads.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_store(values: Vec<f64>, lr: f64) -> (ParamStore, EntryId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.register("p", vec![n], values, lr).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = one_param_store(vec![1.0, -2.0, 3.0], 1e-2);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.values(id), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_moves_against_it() {
        let (mut store, id) = one_param_store(vec![0.0], 1e-2);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..50 {
            store.entry_mut(id).grads[0] = 2.5;
            adam.step(&mut store).unwrap();
        }
        assert!(store.values(id)[0] < 0.0);
        // grads zeroed after the step
        assert_eq!(store.grads(id), &[0.0]);
    }

    /// Quadratic bowl 0.5 ||p - p*||^2: 500 steps at lr 1e-2 get within 1e-3.
    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.3, -0.7, 0.1, 0.9];
        let (mut store, id) = one_param_store(vec![0.0; 4], 1e-2);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..500 {
            let g: Vec<f64> =
                store.values(id).iter().zip(&target).map(|(p, t)| p - t).collect();
            store.entry_mut(id).grads.copy_from_slice(&g);
            adam.step(&mut store).unwrap();
        }
        let dist: f64 = store
            .values(id)
            .iter()
            .zip(&target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "distance to optimum {dist}");
    }

    #[test]
    fn non_finite_gradient_rejected_with_name() {
        let (mut store, id) = one_param_store(vec![0.0], 1e-2);
        let mut adam = Adam::new(&store, AdamConfig::default());
        store.entry_mut(id).grads[0] = f64::NAN;
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("p"));
    }

    #[test]
    fn frozen_entries_never_move() {
        let (mut store, id) = one_param_store(vec![1.0], 1e-2);
        store.set_frozen(id, true);
        let mut adam = Adam::new(&store, AdamConfig::default());
        store.entry_mut(id).grads[0] = 10.0;
        adam.step(&mut store).unwrap();
        assert_eq!(store.values(id), &[1.0]);
    }
}
