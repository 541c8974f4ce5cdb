//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one pair per parameter in registration order.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub config: AdamWConfig,
    /// Step size used by the next update; schedules overwrite this.
    pub learning_rate: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            learning_rate: config.learning_rate,
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter and clears their gradients.
    ///
    /// All parameters must carry a gradient; nothing is modified otherwise.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::UnsteppedParameter { index: i });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Config(
                "parameter list changed between optimizer steps".into(),
            ));
        }

        self.step_count += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let lr = self.learning_rate;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().map(<[f64]>::to_vec).unwrap_or_default();
            let data = p.data_mut();
            for k in 0..data.len() {
                let g = grad[k];
                data[k] -= lr * weight_decay * data[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
