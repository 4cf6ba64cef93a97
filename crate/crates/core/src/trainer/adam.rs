//! Adam with moment buffers that can be saved alongside parameters.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct Adam {
    params: AdamParams,
    vars: BTreeMap<String, Var>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(vars: BTreeMap<String, Var>, params: AdamParams) -> Result<Self> {
        if !(params.lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be > 0, got {}",
                params.lr
            )));
        }
        if !(0.0..1.0).contains(&params.beta1) || !(0.0..1.0).contains(&params.beta2) {
            return Err(Error::InvalidParameter("adam betas must lie in [0, 1)".into()));
        }
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, var) in &vars {
            m.insert(k.clone(), var.as_tensor().zeros_like()?);
            v.insert(k.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            params,
            vars,
            m,
            v,
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        for (k, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if p.weight_decay > 0.0 {
                (g + (var.as_tensor() * p.weight_decay)?)?
            } else {
                g.clone()
            };
            let m = ((&self.m[k] * p.beta1)? + (&g * (1.0 - p.beta1))?)?;
            let v = ((&self.v[k] * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + p.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * p.lr)?)?)?;
            self.m.insert(k.clone(), m);
            self.v.insert(k.clone(), v);
        }
        Ok(())
    }

    /// Moment buffers keyed `m.<name>` and `v.<name>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (k, var) in &self.vars {
            for (prefix, slot) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}.{k}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state {key} has shape {:?}",
                        t.dims()
                    )));
                }
                slot.insert(k.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.t = steps;
        Ok(())
    }
}
