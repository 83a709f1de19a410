use serde::{Deserialize, Serialize};

use super::{NnError, ParamBlock};
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

fn check_grads(params: &[ParamBlock], grads: &[Tensor]) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::BlockCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(NnError::GradientShape {
                block: p.name.clone(),
                expected: p.value.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient { block: p.name.clone() });
        }
    }
    Ok(())
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[ParamBlock]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [ParamBlock], grads: &[Tensor], lr: f64) -> Result<(), NnError> {
        check_grads(params, grads)?;
        if self.first.len() != params.len() {
            return Err(NnError::BlockCount {
                expected: self.first.len(),
                got: params.len(),
            });
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &gi), (mi, vi)) in it {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient step `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut [ParamBlock], grads: &[Tensor], lr: f64) -> Result<(), NnError> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (theta, gi) in p.value.data_mut().iter_mut().zip(g.data()) {
            *theta -= lr * gi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(values: &[f64]) -> ParamBlock {
        ParamBlock {
            name: "w".into(),
            value: Tensor::vector(values.to_vec()),
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_leaves_params() {
        let mut params = vec![block(&[0.5, -0.25])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::vector(vec![0.0, 0.0])], 1e-3).unwrap();
        assert_eq!(params[0].value.data(), &[0.5, -0.25]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut params = vec![block(&[0.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::vector(vec![2.0])], 1e-3).unwrap();
        let (m, v) = (adam.first[0].data()[0], adam.second[0].data()[0]);
        adam.step(&mut params, &[Tensor::vector(vec![0.0])], 1e-3).unwrap();
        assert!((adam.first[0].data()[0] - 0.9 * m).abs() < 1e-15);
        assert!((adam.second[0].data()[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = vec![block(&[0.0])];
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(cfg, &params);
        adam.step(&mut params, &[Tensor::vector(vec![1.0])], 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + cfg.eps);
        assert!((params[0].value.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let mut params = vec![block(&[0.0, 0.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let g = Tensor::vector(vec![3.0, -0.01]);
        let mut prev = params[0].value.clone();
        for _ in 0..500 {
            adam.step(&mut params, &[g.clone()], 1e-3).unwrap();
            let d: Vec<f64> = params[0]
                .value
                .data()
                .iter()
                .zip(prev.data())
                .map(|(a, b)| a - b)
                .collect();
            assert!(d[0] < 0.0 && d[1] > 0.0);
            assert!((d[0].abs() - 1e-3).abs() < 1e-6);
            assert!((d[1].abs() - 1e-3).abs() < 1e-5);
            prev = params[0].value.clone();
        }
    }

    #[test]
    fn nan_gradient_names_block_and_changes_nothing() {
        let mut params = vec![block(&[1.0]), ParamBlock {
            name: "control0.layer1.bias".into(),
            value: Tensor::vector(vec![2.0]),
        }];
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        let err = adam
            .step(
                &mut params,
                &[Tensor::vector(vec![1.0]), Tensor::vector(vec![f64::NAN])],
                1e-3,
            )
            .unwrap_err();
        assert_eq!(
            err,
            NnError::NonFiniteGradient {
                block: "control0.layer1.bias".into()
            }
        );
        assert_eq!(adam.step, 0);
        assert_eq!(params[0].value.data(), &[1.0]);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut params = vec![block(&[1.0])];
        sgd_step(&mut params, &[Tensor::vector(vec![2.0])], 0.1).unwrap();
        assert!((params[0].value.data()[0] - 0.8).abs() < 1e-15);
    }
}
