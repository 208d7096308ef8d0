//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<S> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// First and second moment buffers, parallel to the parameter list.
    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Restore optimizer state from a checkpoint.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<S>>, v: Vec<Vec<S>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::InvalidArgument("moment buffer shapes disagree".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Apply one update using each tensor's stored gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
            self.v = params.iter().map(|p| vec![S::zero(); p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let numel = p.numel();
            if self.m[i].len() != numel {
                return Err(Error::InvalidArgument(format!(
                    "parameter {i} changed size: {} vs {}",
                    self.m[i].len(),
                    numel
                )));
            }
            let grad = p
                .grad()
                .ok_or_else(|| Error::MissingGradient(format!("parameter {i} has no gradient")))?
                .to_vec();
            let data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..numel {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
