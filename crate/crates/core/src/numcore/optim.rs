use std::collections::BTreeMap;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const LR_DECAY: f64 = 0.4;
pub const LR_DECAY_EVERY: usize = 7;

/// Step schedule: `base · 0.4^floor(epoch / 7)`.
pub fn lr_at_epoch(epoch: usize, base: f64) -> f64 {
    base * LR_DECAY.powi((epoch / LR_DECAY_EVERY) as i32)
}

/// Adam moments keyed by parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, path: &str) -> Option<&Matrix> {
        self.m.get(path)
    }

    pub fn second_moment(&self, path: &str) -> Option<&Matrix> {
        self.v.get(path)
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate {lr}")));
    }
    if let Some((path, _)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
        return Err(Error::Numeric(format!("gradient of {path}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (path, p) in store.iter_mut() {
        let (rows, cols) = p.value.shape();
        let m = state
            .m
            .entry(path.to_string())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let v = state
            .v
            .entry(path.to_string())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let values = p.value.data_mut();
        for (i, &g) in p.grad.data().iter().enumerate() {
            let mi = b1 * m.data()[i] + (1.0 - b1) * g;
            let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            values[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at_epoch(0, 5e-4), 5e-4);
        assert!((lr_at_epoch(7, 5e-4) - 2e-4).abs() < 1e-18);
        assert!((lr_at_epoch(14, 5e-4) - 8e-5).abs() < 1e-18);
        assert_eq!(lr_at_epoch(6, 5e-4), 5e-4);
    }

    #[test]
    fn schedule_non_increasing() {
        let lrs: Vec<f64> = (0..60).map(|e| lr_at_epoch(e, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::row_vector(&[1.0, -2.0])).unwrap();
        let before = store.clone();
        let mut st = AdamState::new();
        adam_step(&mut store, &mut st, 0.1).unwrap();
        assert_eq!(store.get("w").unwrap(), before.get("w").unwrap());
    }

    #[test]
    fn single_scalar_step() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::scalar(1.0)).unwrap();
        store.grad_mut("w").unwrap().fill(1.0);
        let mut st = AdamState::new();
        adam_step(&mut store, &mut st, 0.1).unwrap();
        // m̂ = 1, v̂ = 1 → w = 1 − 0.1 · 1 / (1 + 1e-8)
        let w = store.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-8);
        assert_eq!(store.grad("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_finite_gradient_names_path() {
        let mut store = ParamStore::new();
        store.insert("a", Matrix::scalar(1.0)).unwrap();
        store.insert("b", Matrix::scalar(1.0)).unwrap();
        store.grad_mut("b").unwrap().fill(f64::NAN);
        let mut st = AdamState::new();
        match adam_step(&mut store, &mut st, 0.1) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('b')),
            other => panic!("{other:?}"),
        }
        assert_eq!(st.step, 0);
        assert!(adam_step(&mut store, &mut st, 0.0).is_err());
    }
}
