use serde::{Deserialize, Serialize};

use super::{Parameters, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let mut first = Vec::new();
        params.visit(&mut |t| first.push(vec![0.0; t.len()]));
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is aligned with the parameter traversal.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(TensorError::Shape {
                op: "adam",
                expected: vec![self.first.len()],
                found: vec![grads.len()],
            });
        }
        for (g, m) in grads.iter().zip(&self.first) {
            if g.len() != m.len() {
                return Err(TensorError::Shape {
                    op: "adam",
                    expected: vec![m.len()],
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "adam" });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut k = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut(&mut |t| {
            let (m, v, g) = (&mut first[k], &mut second[k], grads[k].data());
            for (((theta, mi), vi), gi) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            k += 1;
        });
        Ok(())
    }
}
