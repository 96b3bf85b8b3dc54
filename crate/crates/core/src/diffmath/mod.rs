//! Reverse-mode differentiation substrate and optimizer.
//!
//! Every trainable component in the crate (MLPs, convolutions, attention,
//! voxel grids) registers flat f64 parameter arrays in a [`ParamStore`] and
//! records its forward pass on a [`Tape`]. Replaying the tape in reverse
//! accumulates gradients, either straight into the store or into per-chunk
//! [`ChunkGrads`] buffers that merge in a fixed order (the determinism
//! contract for parallel ray batches).
//!
//! [`fd`] holds the finite-difference oracle used by tests and the
//! acceptance suite to validate every analytic gradient in the repository.

mod adam;
pub mod fd;
mod mlp;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use mlp::{FinalActivation, Mlp, MlpSpec};
pub use params::{EntryId, ParamEntry, ParamStore};
pub use tape::{backward_into_store, BufId, ChunkGrads, GradSink, PadMode, Tape};

use crate::{Error, Result};

/// Numerically stable softmax (max-subtraction), returning a probability
/// vector. Rejects empty or non-finite input.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("softmax of non-finite logit {bad}")));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Shifted softplus used as the density activation: `ln(1 + exp(x))`.
/// Switches to the linear asymptote for large inputs to avoid overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`]: the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits_uniform() {
        let w = softmax(&[3.5; 8]).unwrap();
        for x in &w {
            assert!((x - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let w = softmax(&[1000.0, 0.0]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1].abs() < 1e-12);
        assert!(w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // Small logits evaluate safely without max-subtraction; use that as
        // the independent route.
        let mut rng = crate::scenegen::rng_from_seed(7);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut rng, -4.0..4.0)).collect();
            let w = softmax(&v).unwrap();
            let sum_exp: f64 = v.iter().map(|x| x.exp()).sum();
            for (wi, xi) in w.iter().zip(&v) {
                assert!((wi - xi.exp() / sum_exp).abs() < 1e-12);
            }
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let v = [0.3, -1.2, 2.5, 0.0, 4.0];
        let a = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softplus_limits() {
        assert!(softplus(-200.0).abs() < 1e-80);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(100.0), 100.0);
    }
}
