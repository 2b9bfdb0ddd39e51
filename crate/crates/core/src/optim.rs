//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: moment accumulators keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment for `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    /// Applies one update to every trainable tensor of `params`. Gradients
    /// are left in place; the caller clears them.
    pub fn step(&mut self, params: &mut dyn Parameterized) -> Result<()> {
        let mut missing = None;
        params.visit_params(&mut |name, t| {
            if t.requires_grad() && t.grad().is_none() && missing.is_none() {
                missing = Some(name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient { name });
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let moments = &mut self.moments;
        params.visit_params_mut(&mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let grad = t.grad().expect("checked above").data().to_vec();
            let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            let dtype = t.dtype();
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g;
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g * g;
                let m_hat = st.m[k] / bias1;
                let v_hat = st.v[k] / bias2;
                *p = dtype.round(*p - lr * weight_decay * *p - lr * m_hat / (v_hat.sqrt() + eps));
            }
        });
        Ok(())
    }
}
