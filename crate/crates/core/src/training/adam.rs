use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: ParamSet,
    pub second: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            config,
            steps: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    /// One bias-corrected step of size `lr` against `grad`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) -> Result<()> {
        params.check_compatible(grad)?;
        params.check_compatible(&self.first)?;
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grad.data(i);
            let m = self.first.data_mut(i);
            let v = self.second.data_mut(i);
            for (j, p) in params.data_mut(i).iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
