//! AdamW: Adam with decoupled weight decay.
//!
//! Each step first shrinks every weight by `lr·weight_decay·w`, independent of
//! the gradient, then applies the bias-corrected Adam update:
//!
//! ```text
//! m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
//! w ← w − lr·λ·w − lr·(m/(1−β₁ᵗ)) / (√(v/(1−β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState<T: Scalar = f32> {
    pub config: AdamWConfig,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.first_moment[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.second_moment[i]
    }

    /// Applies one update to every parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "optimizer parameter count",
                &[params.len()],
                &[grads.len()],
            ));
        }
        for id in params.ids() {
            let (p, g) = (params.get(id), grads.get(id));
            if p.shape() != g.shape() || p.shape() != self.first_moment[id.index()].shape() {
                return Err(Error::shape(
                    format!("optimizer step for `{}`", params.name(id)),
                    p.shape(),
                    g.shape(),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one_m_b1 = T::lit(1.0 - c.beta1);
        let one_m_b2 = T::lit(1.0 - c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let decay = T::lit(c.lr * c.weight_decay);
        let eps = T::lit(c.eps);

        for id in params.ids() {
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + one_m_b1 * g[j];
                v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] = w[j] - decay * w[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn decay_only_step_with_default_recipe() {
        let mut params = single(1.0);
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        let grads = Gradients::from_tensors(vec![Tensor::scalar(0.0)]);
        opt.step(&mut params, &grads).unwrap();
        let w = params.by_name("w").unwrap().item();
        assert!((w - 0.9999997).abs() < 1e-15, "{w}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = 0.37;
        let mut params = single(0.5);
        let mut opt = AdamWState::new(cfg, &params);
        opt.step(&mut params, &Gradients::from_tensors(vec![Tensor::scalar(g)])).unwrap();
        // After one step m̂ = g and v̂ = g², so the move is lr·g/(|g|+ε).
        let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expected = 0.5 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        let w = params.by_name("w").unwrap().item();
        assert!((w - expected).abs() < 1e-15);
        assert!((w - (0.5 - cfg.lr * g / (g + cfg.eps))).abs() < 1e-12);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut params = single(1.0);
        let mut opt = AdamWState::new(AdamWConfig::default(), &params);
        let grads = Gradients::from_tensors(vec![Tensor::zeros(vec![2])]);
        assert!(opt.step(&mut params, &grads).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
