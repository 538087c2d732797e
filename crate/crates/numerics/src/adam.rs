use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{NumericsError, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
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
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Debug, Clone)]
pub struct AdamState<F: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<F>, Vec<F>)>,
}

impl<F: Element> AdamState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update to every trainable parameter. Frozen parameters are
    /// not read or written, even when they carry a gradient.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        for (name, t, trainable) in params.iter() {
            if trainable && t.grad().is_none() {
                return Err(NumericsError::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = F::from_f64_lossy(c.beta1);
        let b2 = F::from_f64_lossy(c.beta2);
        let one = F::one();
        let step_size = F::from_f64_lossy(c.lr / bc1);
        let inv_bc2 = F::from_f64_lossy(1.0 / bc2);
        let eps = F::from_f64_lossy(c.eps);

        for (name, tensor, trainable) in params.iter_mut() {
            if !trainable {
                continue;
            }
            let n = tensor.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![F::zero(); n], vec![F::zero(); n]));
            if m.len() != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![m.len()],
                    rhs: tensor.shape().to_vec(),
                });
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            for (((p, g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * *g;
                *vi = b2 * *vi + (one - b2) * *g * *g;
                *p = *p - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
