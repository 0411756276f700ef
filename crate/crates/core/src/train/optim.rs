//! AdamW with decoupled weight decay.
//!
//! Decay applies only to matrices (rank ≥ 2); biases and norm gains are
//! exempt. A parameter with no gradient in a step is left untouched: no
//! moment update, no decay, no step-count increment.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NamedGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &NamedGrads, lr: f64) -> Result<()> {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (name, g) in grads {
            let var = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            let g = g.to_dtype(var.dtype())?;
            let st = match self.state.remove(name) {
                Some(s) => s,
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    t: 0,
                },
            };
            let t = st.t + 1;
            let m = ((st.m * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((st.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let c1 = 1.0 - beta1.powi(t as i32);
            let c2 = 1.0 - beta2.powi(t as i32);
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + eps)?)?;
            let p = var.as_tensor();
            let decayed = if p.rank() >= 2 && weight_decay > 0.0 {
                (p * (1.0 - lr * weight_decay))?
            } else {
                p.clone()
            };
            var.set(&(decayed - (update * lr)?)?)?;
            self.state.insert(name.clone(), Moments { m, v, t });
        }
        Ok(())
    }
}
