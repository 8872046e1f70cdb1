use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Spatiotemporal points per step; 0 (or at least `M·K`) uses every point.
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            steps: 10_000,
            batch: 100_000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    first: Vec<f64>,
    second: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            self.first[i] = cfg.beta1 * self.first[i] + (1.0 - cfg.beta1) * grad[i];
            self.second[i] = cfg.beta2 * self.second[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            params[i] -= cfg.learning_rate * m / (v.sqrt() + cfg.epsilon);
        }
    }
}
