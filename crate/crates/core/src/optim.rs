//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], lr: f64) {
        let rates = vec![lr; params.len()];
        self.step_each(params, grads, &rates);
    }

    /// [`Self::step`] with a learning rate per parameter tensor.
    pub fn step_each(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], rates: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(rates.len(), self.m.len(), "rate count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        let eps = T::lit(c.eps);
        for ((((p, g), m), v), &lr) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(rates)
        {
            let lr = T::lit(lr);
            assert_eq!(p.numel(), g.len(), "gradient shape mismatch");
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(*g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_sign_scaled() {
        let mut p = Tensor::from_vec(&[3], vec![1.0f64, 1.0, 1.0]).unwrap();
        let g = [2.0, -0.5, 0.0];
        let mut adam = Adam::new(AdamConfig::default(), [3]);
        adam.step(&mut [&mut p], &[&g], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] - 1.1).abs() < 1e-7);
        assert_eq!(p.data()[2], 1.0);
    }
}
