//! Adam optimizer with a staircase learning-rate decay.
//!
//! Fixed moment coefficients β₁ = 0.9, β₂ = 0.999, ε = 1e-8, with bias
//! correction. The effective learning rate at step counter `s` is
//! `lr0 · decay^⌊s / decay_every⌋`; the counter counts completed steps,
//! so steps 0…4999 run at `lr0` and step 5000 is the first decayed one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Training hyperparameters shared by every training entry point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: u64,
    pub batch: usize,
    pub max_iters: usize,
    pub loss_tol: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr0: 1e-3,
            decay: 0.95,
            decay_every: 5000,
            batch: 100,
            max_iters: 100_000,
            loss_tol: 1e-6,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("lr0 > 0 and 0 < decay <= 1 required".into()));
        }
        if self.decay_every == 0 || self.batch == 0 {
            return Err(Error::Config("decay_every and batch must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment state plus the completed-step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Effective learning rate for the upcoming step.
    pub fn lr(&self, sched: &TrainSchedule) -> f64 {
        sched.lr0 * sched.decay.powi((self.step / sched.decay_every) as i32)
    }

    /// One in-place Adam update. `params` and `grads` must match the
    /// state length.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64], sched: &TrainSchedule) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                details: format!(
                    "state {} / params {} / grads {}",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        let lr = self.lr(sched);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + EPS);
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-step trace on three parameters, frozen from a hand-executed
    /// run of the update equations.
    #[test]
    fn two_step_scripted_trace() {
        let sched = TrainSchedule::default();
        let mut state = AdamState::new(3);
        let mut p = vec![1.0, -0.5, 2.0];

        state.apply(&mut p, &[0.1, -0.2, 0.3], &sched).unwrap();
        let after1 = [0.9990000001, -0.49900000005, 1.9990000000333332];
        for (a, e) in p.iter().zip(after1) {
            assert!((a - e).abs() < 1e-15, "step 1: {a} vs {e}");
        }

        state.apply(&mut p, &[-0.1, 0.1, 0.2], &sched).unwrap();
        let after2 = [0.9990526316736842, -0.49873366302718675, 1.9980296479433008];
        for (a, e) in p.iter().zip(after2) {
            assert!((a - e).abs() < 1e-15, "step 2: {a} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let sched = TrainSchedule::default();
        let mut state = AdamState::new(2);
        let mut p = vec![0.7, -0.3];
        state.apply(&mut p, &[0.0, 0.0], &sched).unwrap();
        assert_eq!(p, vec![0.7, -0.3]);
    }

    #[test]
    fn staircase_learning_rate() {
        let sched = TrainSchedule::default();
        let mut state = AdamState::new(1);
        assert_eq!(state.lr(&sched), 1e-3);
        state.step = 4999;
        assert_eq!(state.lr(&sched), 1e-3);
        state.step = 5000;
        assert!((state.lr(&sched) - 9.5e-4).abs() < 1e-18);
        state.step = 10_000;
        assert!((state.lr(&sched) - 9.025e-4).abs() < 1e-18);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let sched = TrainSchedule::default();
        let mut state = AdamState::new(3);
        let mut p = vec![0.0; 2];
        let err = state.apply(&mut p, &[1.0, 2.0], &sched).unwrap_err();
        assert!(matches!(err, crate::error::Error::Shape { .. }));
    }
}
