use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adam with bias correction. Moments are keyed by parameter name and created
/// lazily (zero-initialized) the first time a parameter is stepped.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step_count: u64,
    moments: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.second.as_slice())
    }

    /// One update from gradients accumulated over a single batch.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) -> Result<()> {
        self.step_accumulated(params, lr, 1)
    }

    /// One update from gradients summed over `micro_batches` batches; the sum is
    /// divided by the count before the moment update.
    ///
    /// Frozen parameters are skipped entirely. If any trainable gradient is
    /// non-finite, nothing is modified and the offending parameter is named.
    pub fn step_accumulated(&mut self, params: &mut [&mut Parameter], lr: f64, micro_batches: usize) -> Result<()> {
        if micro_batches == 0 {
            return Err(TensorError::Invalid("gradient accumulation count must be at least 1".into()));
        }
        for p in params.iter() {
            if !p.is_frozen() && p.grad().iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFiniteGradient { name: p.name().to_string() });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let inv_count = 1.0 / micro_batches as f64;
        for p in params.iter_mut() {
            if p.is_frozen() {
                continue;
            }
            let n = p.data().len();
            let m = self.moments.entry(p.name().to_string()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            let (data, grad) = p.data_and_grad_mut();
            for i in 0..n {
                let g = grad[i] * inv_count;
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * g;
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * g * g;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
