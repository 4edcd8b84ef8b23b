//! Adam optimizer over flat parameter vectors, with bias-corrected moment
//! estimates (Kingma & Ba form).

use crate::error::{Result, TadsError};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_len: usize, learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update in place. Rejects shape mismatches and non-finite
    /// gradients before touching any state, so a failed call leaves both
    /// the parameters and the optimizer untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != self.first_moment.len() {
            return Err(TadsError::Shape(format!(
                "optimizer tracks {} parameters, got params={} grads={}",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TadsError::NumericalDomain(format!(
                "non-finite gradient {} at index {pos}",
                grads[pos]
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
