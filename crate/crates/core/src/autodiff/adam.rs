//! Adam with bias correction, and the step-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Piecewise-constant decay: `initial / factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: DEFAULT_LR, factor: 5.0, every: 50 }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = if self.every == 0 { 0 } else { epoch / self.every };
        self.initial / self.factor.powi(drops as i32)
    }
}

/// Learning rate for `epoch` under the default schedule
/// (0.001, divided by 5 every 50 epochs).
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().lr(epoch)
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Optimizer state. Moments are created lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_betas(self, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, ..self }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

/// One Adam update of every parameter in `store` from its gradient buffer,
/// then zeroes the gradients. A non-finite gradient aborts the step before
/// anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for (name, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, p) in store.iter_mut() {
        let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
        });
        let values = p.value.data_mut();
        let grads = p.grad.data();
        let ms = mom.m.data_mut();
        let vs = mom.v.data_mut();
        for i in 0..values.len() {
            let g = grads[i];
            ms[i] = b1 * ms[i] + (1.0 - b1) * g;
            vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
            let m_hat = ms[i] / bc1;
            let v_hat = vs[i] / bc2;
            let denom = v_hat.sqrt() + eps;
            if denom > 0.0 {
                values[i] -= lr * m_hat / denom;
            }
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], w)).unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let mut grads = crate::autodiff::Gradients::new();
        grads.insert("w".into(), Tensor::full(&[1], g));
        store.zero_grad();
        store.accumulate(&grads).unwrap();
    }

    #[test]
    fn schedule_steps_down_every_fifty_epochs() {
        assert_eq!(lr_schedule(0), 0.001);
        assert_eq!(lr_schedule(49), 0.001);
        assert!((lr_schedule(50) - 0.0002).abs() < 1e-18);
        assert!((lr_schedule(100) - 0.00004).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 0..400 {
            assert!(lr_schedule(e) <= prev);
            prev = lr_schedule(e);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(0.7);
        let mut state = AdamState::default();
        adam_step(&mut store, &mut state).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.7]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn quadratic_trace_matches_hand_computation() {
        // f(w) = w^2 from w0 = 1 with lr 0.1; expected iterates computed
        // independently with exact decimal arithmetic.
        let expected = [0.9000000005, 0.8004122286917922, 0.7015862729460296];
        let mut store = scalar_store(1.0);
        let mut state = AdamState::new(0.1);
        for want in expected {
            let w = store.get("w").unwrap().data()[0];
            set_grad(&mut store, 2.0 * w);
            adam_step(&mut store, &mut state).unwrap();
            let got = store.get("w").unwrap().data()[0];
            assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn zero_betas_reduce_to_sign_descent() {
        for g in [3.5, -0.01, 1e-4] {
            let mut store = scalar_store(2.0);
            let mut state = AdamState::new(0.05).with_betas(0.0, 0.0, 0.0);
            set_grad(&mut store, g);
            adam_step(&mut store, &mut state).unwrap();
            let got = store.get("w").unwrap().data()[0];
            assert!((got - (2.0 - 0.05 * g.signum())).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, f64::NAN);
        let err = adam_step(&mut store, &mut AdamState::default()).unwrap_err();
        assert!(err.to_string().contains("parameter w"));
        assert_eq!(store.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn gradients_are_zeroed_after_step() {
        let mut store = scalar_store(1.0);
        set_grad(&mut store, 0.3);
        adam_step(&mut store, &mut AdamState::default()).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0]);
    }
}
