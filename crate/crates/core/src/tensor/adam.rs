use serde::{Deserialize, Serialize};

use super::array::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: vec![self.m.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    expected: m.shape().to_vec(),
                    got: if p.shape() != m.shape() { p.shape() } else { g.shape() }.to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pi -= lr * weight_decay * *pi;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.5])];
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(cfg(0.0), &p);
        st.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_at_most_lr_against_the_gradient() {
        // Closed form: m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps).
        let g = [0.3, -7.0, 1e-3, 50.0];
        let mut p = vec![Tensor::vector(vec![0.0; 4])];
        let mut st = AdamState::new(cfg(0.0), &p);
        st.step(&mut p, &[Tensor::vector(g.to_vec())]).unwrap();
        let lr = st.config.lr;
        for (delta, gi) in p[0].data().iter().zip(g) {
            let expect = -lr * gi / (gi.abs() + st.config.eps);
            assert!((delta - expect).abs() < 1e-18);
            assert!(delta.signum() == -gi.signum());
            assert!(delta.abs() <= lr * (1.0 + 1e-12));
        }
    }

    #[test]
    fn identical_state_copies_give_identical_updates() {
        let mut p1 = vec![Tensor::vector(vec![0.2, 0.4])];
        let mut st1 = AdamState::new(AdamConfig::default(), &p1);
        st1.step(&mut p1, &[Tensor::vector(vec![0.1, -0.1])]).unwrap();
        let mut p2 = p1.clone();
        let mut st2 = st1.clone();
        let g = [Tensor::vector(vec![0.5, 0.25])];
        st1.step(&mut p1, &g).unwrap();
        st2.step(&mut p2, &g).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(vec![0.0; 3])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(st.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_gradient() {
        let mut p = vec![Tensor::vector(vec![2.0])];
        let mut st = AdamState::new(cfg(0.5), &p);
        st.step(&mut p, &[Tensor::zeros(&[1])]).unwrap();
        let lr = st.config.lr;
        assert!((p[0].data()[0] - 2.0 * (1.0 - lr * 0.5)).abs() < 1e-15);
    }
}
