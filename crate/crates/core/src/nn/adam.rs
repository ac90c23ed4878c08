use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Nothing is modified when any check fails.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be positive, got {lr}")));
        }
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension {
                context: "adam parameter count",
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(Error::Dimension {
                    context: "adam tensor size",
                    expected: self.first[i].len(),
                    got: g.len(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { index: i });
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_unit_gradient() {
        let mut p = Tensor::scalar(0.0);
        let mut state = AdamState::new([&p], AdamConfig::default());
        state.step(&mut [&mut p], &[Tensor::scalar(1.0)], 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.item().unwrap() - expected).abs() < 1e-18);
        assert!((expected + 9.99999e-4).abs() < 1e-9);
        assert_eq!(state.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]);
        let orig = p.clone();
        let mut state = AdamState::new([&p], AdamConfig::default());
        for _ in 0..50 {
            state.step(&mut [&mut p], &[Tensor::zeros(&[3])], 3e-3).unwrap();
        }
        assert_eq!(p, orig);
        assert!(state.second_moment()[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_params_identical_updates() {
        let mut a = Tensor::vector(vec![0.3, 0.3]);
        let mut state = AdamState::new([&a], AdamConfig::default());
        for k in 0..10 {
            let g = Tensor::vector(vec![k as f64 - 4.0; 2]);
            state.step(&mut [&mut a], &[g], 1e-2).unwrap();
        }
        assert_eq!(a.data()[0], a.data()[1]);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new([&p], AdamConfig::default());
        let err = state
            .step(&mut [&mut p], &[Tensor::vector(vec![0.0, f64::NAN])], 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 0 }));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(state.steps_taken(), 0);
    }

    #[test]
    fn rejects_bad_lr_and_shapes() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut state = AdamState::new([&p], AdamConfig::default());
        assert!(state.step(&mut [&mut p], &[Tensor::vector(vec![1.0])], 0.0).is_err());
        assert!(state.step(&mut [&mut p], &[Tensor::vector(vec![1.0, 2.0])], 1e-3).is_err());
    }
}
