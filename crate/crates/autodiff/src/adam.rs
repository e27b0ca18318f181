use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adam hyperparameters. `Default` gives the usual library defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

impl AdamConfig {
    /// Settings used for the generator, critic and triplet encoder.
    pub fn gan() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Moment estimates for one set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        if config.lr <= 0.0 || !config.lr.is_finite() {
            return Err(TensorError::NonPositiveLearningRate(config.lr));
        }
        let zeros: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Ok(AdamState {
            config,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(TensorError::mismatch(
                "adam_step",
                &[self.first_moment.len()],
                &[params.len(), grads.len()],
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::mismatch("adam_step", p.shape(), g.shape()));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(lr: f64, p: &Tensor) -> AdamState {
        AdamState::new(AdamConfig::default().with_lr(lr), [p]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut s = state(0.1, &p);
        s.step(&mut [&mut p], &[Tensor::vector(vec![1.0, 1.0])]).unwrap();
        let before = p.clone();
        let m_before = s.first_moment[0].clone();
        s.step(&mut [&mut p], &[Tensor::zeros(vec![2])]).unwrap();
        // the first moment still moves the parameter; it must shrink by beta1
        for (a, b) in s.first_moment[0].data().iter().zip(m_before.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        assert_eq!(s.step_count, 2);

        let mut q = Tensor::vector(vec![3.0]);
        let mut fresh = state(0.1, &q);
        fresh.step(&mut [&mut q], &[Tensor::zeros(vec![1])]).unwrap();
        assert_eq!(q.data(), &[3.0]);
        assert_ne!(before, p);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::scalar(0.5);
        let mut s = state(1e-4, &p);
        s.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((0.5 - p.item() - 1e-4).abs() < 1e-9);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let (lr, b1, b2, eps) = (1e-2, 0.9f64, 0.999f64, 1e-7);
        let mut oracle = Vec::new();
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=10 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            oracle.push(w);
        }

        let mut p = Tensor::scalar(1.0);
        let mut s = state(lr, &p);
        let mut last = 1.0f64;
        for expected in oracle {
            let g = Tensor::scalar(2.0 * p.item());
            s.step(&mut [&mut p], &[g]).unwrap();
            assert!(p.item().abs() < last.abs());
            assert!((p.item() - expected).abs() < 1e-15);
            last = p.item();
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Tensor::scalar(1.0);
        assert!(AdamState::new(AdamConfig::default().with_lr(0.0), [&p]).is_err());
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut s = state(0.1, &p);
        assert!(s.step(&mut [&mut p], &[Tensor::scalar(1.0)]).is_err());
        assert_eq!(s.step_count, 0);
    }
}
