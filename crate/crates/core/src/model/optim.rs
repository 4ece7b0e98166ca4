//! AdamW with decoupled weight decay.
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! p ← p − lr · m̂ / (√v̂ + ε),   m̂ = m / (1 − β1ᵗ),  v̂ = v / (1 − β2ᵗ)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::ParamSet;
use crate::scalar::Scalar;

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
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig { lr, ..Self::default() }
    }
}

/// Moment estimates keyed by parameter name, created on first use.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Matrix<T>, Matrix<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !params.is_congruent(grads) {
            return Err(Error::Protocol("gradients are not congruent with parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let lr = T::lit(c.lr);
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let eps = T::lit(c.eps);
        for ((name, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            if m.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: m.shape(),
                    right: g.shape(),
                });
            }
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *pi *= decay;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::WeightSet;

    fn single(values: &[f64]) -> WeightSet<f64> {
        [(
            "w".to_string(),
            Matrix::from_vec(1, values.len(), values.to_vec()).unwrap(),
        )]
        .into_iter()
        .collect()
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = single(&[1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        for _ in 0..3 {
            opt.step(&mut p, &single(&[0.0, 0.0, 0.0])).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn memoryless_first_step_closed_form() {
        let lr = 0.1;
        let eps = 1e-8;
        let g = [0.5, -2.0, 1e-3];
        let mut p = single(&[1.0, 1.0, 1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps,
            weight_decay: 0.0,
        });
        opt.step(&mut p, &single(&g)).unwrap();
        for (got, gi) in p.get("w").unwrap().as_slice().iter().zip(g) {
            let want = 1.0 - lr * gi / (f64::abs(gi) + eps);
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = single(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert_eq!(opt.steps(), 0);
        opt.step(&mut p, &single(&[0.3])).unwrap();
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn rejects_incongruent_grads() {
        let mut p = single(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        assert!(opt.step(&mut p, &single(&[1.0, 2.0])).is_err());
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut p = single(&[2.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut p, &single(&[0.0])).unwrap();
        assert!((p.get("w").unwrap()[(0, 0)] - 2.0 * 0.95).abs() < 1e-12);
    }
}
