//! Adam over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for a parameter vector of fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn reset(&mut self) {
        *self = AdamState::new(self.m.len());
    }

    /// One update in place. A coordinate whose gradient has always been
    /// zero does not move.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(mismatch(format!(
                "adam state has {} entries, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    state.step(params, grad, lr)
}

/// Learning rate multiplied by `factor` once, from iteration `at` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub lr: f64,
    pub decay_at: Option<usize>,
    pub factor: f64,
}

impl StepDecay {
    pub fn constant(lr: f64) -> Self {
        StepDecay {
            lr,
            decay_at: None,
            factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("learning rate must be > 0"));
        }
        if !(self.factor.is_finite() && self.factor > 0.0) {
            return Err(invalid("decay factor must be > 0"));
        }
        Ok(())
    }

    pub fn at(&self, iter: usize) -> f64 {
        match self.decay_at {
            Some(k) if iter >= k => self.lr * self.factor,
            _ => self.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_quadratic_converges() {
        let mut s = AdamState::new(1);
        let mut x = [1.0];
        let mut reached = None;
        for k in 0..2000 {
            let g = [2.0 * x[0]];
            s.step(&mut x, &g, 1e-2).unwrap();
            if x[0].abs() < 1e-3 {
                reached = Some(k);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", x[0]);
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut s = AdamState::new(3);
        let mut x = [0.3, -2.0, 7.0];
        for _ in 0..500 {
            s.step(&mut x, &[0.0; 3], 0.1).unwrap();
        }
        assert_eq!(x, [0.3, -2.0, 7.0]);
    }

    #[test]
    fn first_step_is_about_lr() {
        for g in [1e3, 1e-3, -5.0] {
            let mut s = AdamState::new(1);
            let mut x = [0.0];
            s.step(&mut x, &[g], 1e-2).unwrap();
            let expected = -1e-2 * g.signum();
            assert!((x[0] - expected).abs() < 1e-6 * 1e-2 / g.abs().min(1.0) + 1e-12, "{g}: {}", x[0]);
        }
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut s = AdamState::new(2);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn step_decay_schedule() {
        let d = StepDecay {
            lr: 1e-2,
            decay_at: Some(250),
            factor: 0.1,
        };
        assert_eq!(d.at(0), 1e-2);
        assert_eq!(d.at(249), 1e-2);
        assert!((d.at(250) - 1e-3).abs() < 1e-18);
        assert!(StepDecay::constant(0.0).validate().is_err());
    }

    proptest! {
        #[test]
        fn update_is_deterministic(g in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let run = || {
                let mut s = AdamState::new(g.len());
                let mut x = vec![0.5; g.len()];
                for _ in 0..5 {
                    s.step(&mut x, &g, 1e-2).unwrap();
                }
                x
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn step_bounded_by_lr(g in -1e4f64..1e4, lr in 1e-4f64..1.0) {
            // A constant gradient gives m̂ / √v̂ = ±1 exactly, so no step
            // exceeds the learning rate.
            let mut s = AdamState::new(1);
            let mut x = [0.0];
            for _ in 0..10 {
                let before = x[0];
                s.step(&mut x, &[g], lr).unwrap();
                prop_assert!((x[0] - before).abs() <= lr * (1.0 + 1e-12));
            }
        }
    }
}
