use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adaptive-moment optimizer state for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        Self { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update using each parameter's accumulated gradient.
    /// Parameters without a gradient are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::dim(format!(
                    "parameter {i} has {} elements, moment buffer has {}",
                    p.numel(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [3.0, -0.2, 1e-3] {
            let mut p = Tensor::scalar(0.0);
            p.accumulate_grad(&[g]).unwrap();
            let mut st = AdamState::new(AdamConfig::with_lr(0.01), [&p]);
            st.step(&mut [&mut p]).unwrap();
            let delta = p.item();
            assert!((delta.abs() - 0.01).abs() < 1e-6, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn minimizes_square() {
        // f(x) = x², f'(x) = 2x
        let mut x = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), [&x]);
        for _ in 0..100 {
            x.zero_grad();
            let g = 2.0 * x.item();
            x.accumulate_grad(&[g]).unwrap();
            st.step(&mut [&mut x]).unwrap();
        }
        assert!(x.item().abs() < 0.05, "{}", x.item());
        assert_eq!(st.steps_taken(), 100);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), [&a]);
        let mut b = Tensor::zeros(&[3]);
        assert!(matches!(st.step(&mut [&mut b]), Err(Error::Dimension(_))));
        assert!(st.step(&mut []).is_err());
    }
}
