use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW moments and hyperparameters for a single parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(numel: usize) -> Self {
        OptimizerState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One decoupled-weight-decay update. On a non-finite gradient nothing
    /// changes (moments, counter and params all stay put) and an error is
    /// returned.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("params {} grads {} state {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("adamw: non-finite gradient, step rejected");
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut st = OptimizerState::new(3).with_weight_decay(0.0);
        let mut p = vec![0.3, -1.0, 2.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![0.3, -1.0, 2.0]);
    }

    #[test]
    fn first_step_by_hand() {
        let mut st = OptimizerState::new(1).with_weight_decay(0.0);
        let mut p = vec![1.0];
        st.step(&mut p, &[1.0]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut st = OptimizerState::new(1);
        let mut p = vec![2.0];
        st.step(&mut p, &[0.0]).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_rejected() {
        let mut st = OptimizerState::new(2);
        let mut p = vec![1.0, 1.0];
        let before = st.clone();
        assert!(st.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(st, before);
        assert!(st.step(&mut p, &[1.0]).is_err());
    }

    #[test]
    fn trajectory_is_deterministic() {
        let run = || {
            let mut st = OptimizerState::new(2);
            let mut p = vec![0.5, -0.5];
            for k in 0..20 {
                let g = [p[0] * 2.0 + f64::from(k) * 0.01, p[1].sin()];
                st.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn second_moment_stays_nonnegative(gs in prop::collection::vec(-5.0f64..5.0, 1..30)) {
            let mut st = OptimizerState::new(1);
            let mut p = vec![0.0];
            for g in gs {
                st.step(&mut p, &[g]).unwrap();
                prop_assert!(st.v[0] >= 0.0);
                prop_assert!(p[0].is_finite());
            }
        }
    }
}
