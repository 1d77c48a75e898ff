use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected adaptive-moment update, at learning rate `lr`.
    pub fn update_with_lr(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient coordinate {i} is {} at optimizer step {}",
                grad[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.update_with_lr(params, grad, self.config.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -2.0, 0.25];
        let scales = [1.0, 10.0, 0.1];
        let mut p = vec![0.0; 3];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, 3);
        for step in 0..5000 {
            let lr = 0.05 * (1.0 - step as f64 / 5000.0);
            let g: Vec<f64> = (0..3).map(|i| 2.0 * scales[i] * (p[i] - target[i])).collect();
            opt.update_with_lr(&mut p, &g, lr).unwrap();
        }
        for i in 0..3 {
            assert!((p[i] - target[i]).abs() < 1e-6, "coord {i}: {}", p[i]);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = vec![0.3, -0.1];
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, 2);
        opt.update(&mut p, &[1.0, -2.0]).unwrap();
        assert_eq!(p, vec![0.3, -0.1]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![0.0; 2];
        let mut opt = Adam::new(AdamConfig::default(), 2);
        let err = opt.update(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }
}
