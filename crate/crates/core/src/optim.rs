//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Keras defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-7.
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Optimizer state: first and second moments per parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Restores state saved alongside a checkpoint.
    pub fn restore(config: AdamConfig, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Self {
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    /// Applies one update to every parameter with `requires_grad`.
    /// Frozen parameters are skipped and keep their moments untouched.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name().to_string()));
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - c.beta1), T::from_f64_lossy(1.0 - c.beta2));
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let (inv_c1, inv_c2) = (T::from_f64_lossy(1.0 / correction1), T::from_f64_lossy(1.0 / correction2));

        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * g;
                *vi = b2 * *vi + one_b2 * g * g;
                let m_hat = *mi * inv_c1;
                let v_hat = *vi * inv_c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Group;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("p", Group::Backbone, Tensor::from_vec(&[1], vec![v]).unwrap())
    }

    #[test]
    fn first_step_moves_by_lr_over_one_plus_eps() {
        let mut params = vec![scalar_param(0.0)];
        params[0].grad = Some(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params).unwrap();
        let expected = -0.001 / (1.0 + 1e-7);
        assert!((params[0].value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = vec![scalar_param(0.3)];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            params[0].grad = Some(Tensor::zeros(&[1]));
            adam.step(&mut params).unwrap();
        }
        assert_eq!(params[0].value.data()[0], 0.3);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // Reference trajectory simulated independently with scalar arithmetic.
        let cfg = AdamConfig::default();
        let (mut p_ref, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * p_ref;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p_ref -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            expected.push(p_ref);
        }
        let mut params = vec![scalar_param(1.0)];
        let mut adam = Adam::new(cfg);
        let mut last = 1.0f64;
        for e in expected {
            let p = params[0].value.data()[0];
            params[0].grad = Some(Tensor::from_vec(&[1], vec![2.0 * p]).unwrap());
            adam.step(&mut params).unwrap();
            let now = params[0].value.data()[0];
            assert!(now.abs() < last.abs());
            assert!((now - e).abs() < 1e-15);
            last = now;
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![scalar_param(1.0)];
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut params), Err(Error::MissingGrad(_))));
        params[0].requires_grad = false;
        adam.step(&mut params).unwrap();
        assert_eq!(params[0].value.data()[0], 1.0);
    }
}
