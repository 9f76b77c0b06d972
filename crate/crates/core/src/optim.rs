//! Adam over a named parameter group.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. The learning rate is supplied per step so that the caller
/// owns the schedule.
pub struct Adam {
    config: AdamConfig,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl Adam {
    pub fn new(vars: BTreeMap<String, Var>, config: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok((name, Slot { var, m, v }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            slots,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update to every parameter of the group. Parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in self.slots.values_mut() {
            let theta = slot.var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => g.clone(),
                None => theta.zeros_like()?,
            };
            // detached, or each moment would hold the graph of every earlier step
            let g = if weight_decay != 0.0 {
                g.add(&theta.affine(weight_decay, 0.0)?)?.detach()
            } else {
                g.detach()
            };
            slot.m = slot.m.affine(beta1, 0.0)?.add(&g.affine(1.0 - beta1, 0.0)?)?.detach();
            slot.v = slot.v.affine(beta2, 0.0)?.add(&g.sqr()?.affine(1.0 - beta2, 0.0)?)?.detach();
            let m_hat = slot.m.affine(1.0 / bc1, 0.0)?;
            let v_hat = slot.v.affine(1.0 / bc2, 0.0)?;
            let update = m_hat.div(&v_hat.sqrt()?.affine(1.0, eps)?)?;
            slot.var.set(&theta.sub(&update.affine(lr, 0.0)?)?)?;
        }
        Ok(())
    }

    /// First and second moment estimates keyed `m.<name>` / `v.<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, slot) in &self.slots {
            out.insert(format!("m.{name}"), slot.m.clone());
            out.insert(format!("v.{name}"), slot.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let fetch = |key: String| {
                state
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Invalid(format!("missing optimizer state `{key}`")))
            };
            let m = fetch(format!("m.{name}"))?;
            let v = fetch(format!("v.{name}"))?;
            if m.dims() != slot.var.dims() || v.dims() != slot.var.dims() {
                return Err(Error::Shape(format!("optimizer state for `{name}` has wrong shape")));
            }
            slot.m = m.to_dtype(slot.var.dtype())?;
            slot.v = v.to_dtype(slot.var.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}
