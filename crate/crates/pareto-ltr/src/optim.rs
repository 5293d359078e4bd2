//! Adam over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state: first/second moment estimates plus the step counter used
/// for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, dim: usize) -> Self {
        Self {
            config,
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// One bias-corrected update. Returns the delta to add to the
    /// parameters (the negative scaled step), so a zero gradient on fresh
    /// state yields an exactly zero delta.
    pub fn step(&mut self, gradient: &[f64]) -> Result<Vec<f64>> {
        if gradient.len() != self.first.len() {
            return Err(Error::InvalidInput(format!(
                "gradient has {} entries, optimizer state has {}",
                gradient.len(),
                self.first.len()
            )));
        }
        self.steps += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bias2 = 1.0 - c.beta2.powi(self.steps as i32);
        let mut delta = Vec::with_capacity(gradient.len());
        for ((m, v), &g) in self.first.iter_mut().zip(&mut self.second).zip(gradient) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            delta.push(-c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon));
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_computation() {
        // g = 1, fresh state, lr = 0.001:
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
        // delta = -0.001 / (1 + 1e-8).
        let mut adam = Adam::new(AdamConfig::default(), 1);
        let d = adam.step(&[1.0]).unwrap();
        assert!((d[0] - (-0.000999999990000000_1)).abs() < 1e-15, "{}", d[0]);
    }

    #[test]
    fn zero_gradient_fresh_state_is_zero_delta() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let d = adam.step(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        assert!(adam.step(&[1.0]).is_err());
    }

    #[test]
    fn steps_shrink_toward_quadratic_minimum() {
        // Minimize (x - 3)^2 from x = 0; Adam should get close.
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.05, ..AdamConfig::default() }, 1);
        let mut x = 0.0;
        for _ in 0..2000 {
            let g = 2.0 * (x - 3.0);
            x += adam.step(&[g]).unwrap()[0];
        }
        assert!((x - 3.0).abs() < 0.05, "x = {x}");
    }
}
