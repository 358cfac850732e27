use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }

    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut params = vec![Tensor::row(&[1.5, -2.0, 0.25])];
        let before = params.clone();
        let mut state = AdamState::new(&params, cfg(0.1));
        for _ in 0..10 {
            adam_step(&mut params, &[Tensor::zeros(&[1, 3])], &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step(), 10);
    }

    #[test]
    fn first_update_is_learning_rate() {
        // m̂ = g, v̂ = g² at step 1, so the step is lr·g/(|g| + ε) ≈ lr.
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params, cfg(0.1));
        adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut params = vec![Tensor::row(&[0.3, 0.3])];
        let mut state = AdamState::new(&params, cfg(0.05));
        for k in 0..25 {
            let g = (k as f64 * 0.7).sin();
            adam_step(&mut params, &[Tensor::row(&[g, g])], &mut state).unwrap();
            assert_eq!(params[0].data()[0].to_bits(), params[0].data()[1].to_bits());
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::row(&[0.0, 0.0])];
        let mut state = AdamState::new(&params, cfg(0.1));
        let err = adam_step(&mut params, &[Tensor::row(&[0.0])], &mut state).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "adam_step", .. }));
        assert_eq!(state.step(), 0);
    }
}
