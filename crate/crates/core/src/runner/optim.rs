//! AdamW with decoupled weight decay and global gradient-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(10.0),
        }
    }
}

/// Optimizer moments, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in params.iter() {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            step: 0,
            first,
            second,
        })
    }

    /// Global L2 norm of all parameter gradients (missing gradients count
    /// as zero).
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0f64;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`. Returns the pre-clipping gradient
    /// norm.
    pub fn update(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        let norm = Self::grad_norm(params, grads)?;
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * clip)?;
            let m = self.first.get_mut(name).expect("moment per parameter");
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = self.second.get_mut(name).expect("moment per parameter");
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&self.first[name] / bc1)?;
            let v_hat = (&self.second[name] / bc2)?;
            let step = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (step * lr)?)?)?;
        }
        Ok(norm)
    }
}
