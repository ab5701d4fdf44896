use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Result<Self> {
        let mut m = ParamStore::new();
        for (p, t) in params.iter() {
            m.insert(p, Tensor::zeros(t.shape())?);
        }
        Ok(Self { v: m.clone(), m, t: 0 })
    }

    /// One bias-corrected Adam update at learning rate `lr`. Every parameter
    /// must have a gradient.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Vec<f64>>,
        cfg: &AdamConfig,
        lr: f64,
    ) -> Result<()> {
        for (path, _) in params.iter() {
            if !grads.contains_key(path) {
                return Err(Error::MissingGradient(path.to_string()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (path, p) in params.iter_mut() {
            let g = &grads[path];
            if g.len() != p.len() {
                return Err(Error::Contract(format!("gradient for `{path}` has the wrong length")));
            }
            let m = self.m.get_mut(path)?.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(path)?.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(path)?.data(), self.v.get(path)?.data());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.insert("adam_t", self.t);
        m
    }
}
