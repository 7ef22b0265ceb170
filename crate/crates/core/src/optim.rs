//! Adam with bias correction, one instance per parameter group.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// In-place update of `params` given `grad`. If `clip` is set, the
    /// gradient is rescaled so its L2 norm does not exceed it.
    pub fn update(&mut self, params: &mut [T], grad: &[T], clip: Option<f64>) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments but got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        let mut scale = T::one();
        if let Some(c) = clip {
            let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if norm > c && norm > 0.0 {
                scale = T::lit(c / norm);
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let step_size = T::lit(c.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            let m = b1 * self.m[i] + one_b1 * g;
            let v = b2 * self.v[i] + one_b2 * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
        }
        Ok(())
    }
}
