use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step_count: u64,
    shapes: Vec<Vec<usize>>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self::for_shapes(config, params.iter().map(|p| p.shape().to_vec()).collect())
    }

    pub fn for_shapes(config: AdamConfig, shapes: Vec<Vec<usize>>) -> Self {
        let zeros: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        Self {
            config,
            step_count: 0,
            shapes,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// Applies one update `p -= lr * m_hat / (sqrt(v_hat) + eps)` to every
    /// parameter using the matching gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<(), TensorError> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "optimizer tracks {} tensors, got {} params and {} grads",
                    self.shapes.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.len() != p.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: shape.clone(),
                    rhs: if p.shape() != shape.as_slice() {
                        p.shape().to_vec()
                    } else {
                        vec![g.len()]
                    },
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[vec![0.0; 3]]).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::vector(vec![0.5, 0.5])];
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &[vec![0.3, -2.0]]).unwrap();
        // m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps)
        let d0 = params[0].data()[0] - 0.5;
        let d1 = params[0].data()[1] - 0.5;
        assert!((d0 + cfg.learning_rate * 0.3 / (0.3 + cfg.epsilon)).abs() < 1e-15);
        assert!((d1 - cfg.learning_rate * 2.0 / (2.0 + cfg.epsilon)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_recurrence() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(cfg, &params);
        let g = 0.7;
        adam.step(&mut params, &[vec![g]]).unwrap();
        adam.step(&mut params, &[vec![g]]).unwrap();
        assert_eq!(adam.step_count(), 2);
        let m1 = (1.0 - cfg.beta1) * g;
        let m2 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g;
        let v1 = (1.0 - cfg.beta2) * g * g;
        let v2 = cfg.beta2 * v1 + (1.0 - cfg.beta2) * g * g;
        assert!((adam.first_moment()[0][0] - m2).abs() < 1e-15);
        assert!((adam.second_moment()[0][0] - v2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[vec![0.0; 3]]).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
