use super::params::TensorSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for one tensor set, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn for_params<T: TensorSet>(params: &T) -> Self {
        Self::new(params.len(), AdamConfig::default())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<T: TensorSet>(&mut self, params: &mut T, grads: &T, lr: f64) -> Result<()> {
        let grads = grads.slices();
        let total: usize = grads.iter().map(|g| g.len()).sum();
        if total != self.m.len() || params.len() != total {
            return Err(Error::param(format!(
                "optimizer tracks {} values but received {total} gradients for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric("non-finite gradient passed to Adam".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads) {
            for (x, &gi) in p.iter_mut().zip(g) {
                let m = beta1 * self.m[k] + (1.0 - beta1) * gi;
                let v = beta2 * self.v[k] + (1.0 - beta2) * gi * gi;
                self.m[k] = m;
                self.v[k] = v;
                *x -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }
}
