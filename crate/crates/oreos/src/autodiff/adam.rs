//! The ADAM optimizer with bias-corrected moment estimates.

use super::sequential::GradientSet;
use super::tensor::Tensor;
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first and second moment accumulators plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: GradientSet,
    v: GradientSet,
}

impl AdamState {
    pub fn new(params: &[Vec<Tensor>]) -> AdamState {
        AdamState {
            t: 0,
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: `p -= alpha * m_hat / (sqrt(v_hat) + eps)` with the
    /// bias-corrected moments. Rejects non-finite gradients.
    pub fn step(
        &mut self,
        config: &AdamConfig,
        params: &mut [Vec<Tensor>],
        grads: &GradientSet,
    ) -> Result<(), NetError> {
        for (layer, group) in grads.0.iter().enumerate() {
            for (index, g) in group.iter().enumerate() {
                if !g.is_finite() {
                    return Err(NetError::NonFiniteGradient { layer, index });
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - config.beta2.powi(self.t as i32);
        for (layer, group) in params.iter_mut().enumerate() {
            for (index, p) in group.iter_mut().enumerate() {
                let m = self.m.0[layer][index].data_mut();
                let v = self.v.0[layer][index].data_mut();
                let g = grads.0[layer][index].data();
                for i in 0..p.numel() {
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
                    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p.data_mut()[i] -= config.alpha * m_hat / (v_hat.sqrt() + config.epsilon);
                }
            }
        }
        Ok(())
    }
}
