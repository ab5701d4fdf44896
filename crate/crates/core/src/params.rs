//! Path-addressed learnable parameters.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{format, Gradients, Tape, Tensor, Var};

/// Ordered map from parameter path (`spatial.latb0.W_Q`, ...) to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.params.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Contract(format!("no parameter named `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalars under paths starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Records every parameter on `tape`, as a gradient-tracking leaf when
    /// `trainable` and as a constant otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Writes each parameter to `dir/<path>.udct`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (path, t) in &self.params {
            format::save(&tensor_file(dir, path), t)?;
        }
        Ok(())
    }

    /// Loads a store with exactly the paths and shapes of `template` from `dir`.
    pub fn load_dir(dir: &Path, template: &ParamStore) -> Result<Self> {
        let mut out = ParamStore::new();
        for (path, expected) in &template.params {
            let file = tensor_file(dir, path);
            if !file.exists() {
                return Err(Error::Contract(format!(
                    "checkpoint {} is missing tensor `{path}`",
                    dir.display()
                )));
            }
            let t = format::load(&file)?;
            if t.shape() != expected.shape() {
                return Err(Error::Shape {
                    shape: t.shape().to_vec(),
                    reason: format!("`{path}` should be {:?}", expected.shape()),
                });
            }
            out.insert(path.clone(), t);
        }
        Ok(out)
    }
}

pub fn tensor_file(dir: &Path, path: &str) -> PathBuf {
    dir.join(format!("{path}.udct"))
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bindings {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{path}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Rebinds `path` to `var`, e.g. to probe one parameter in isolation.
    pub fn with_override(mut self, path: &str, var: Var) -> Self {
        self.vars.insert(path.to_string(), var);
        self
    }

    /// Per-path gradients, in parameter order. Parameters that the loss does
    /// not depend on get zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &mut Gradients) -> IndexMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (k.clone(), g)
            })
            .collect()
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    /// Conv weight and bias, uniform in ±1/√fan_in.
    pub fn conv(&mut self, c_out: usize, c_in: usize, k: usize) -> Result<(Tensor, Tensor)> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Ok((
            self.uniform(&[c_out, c_in, k, k], bound)?,
            self.uniform(&[c_out], bound)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_grads() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        store.insert("unused", Tensor::zeros(&[3]).unwrap());
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, true);
        let a = b.get("a").unwrap();
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let g = b.collect_grads(&tape, &mut grads);
        assert_eq!(g["a"], vec![2.0, 4.0]);
        assert_eq!(g["unused"], vec![0.0; 3]);
        assert!(b.get("nope").is_err());
    }

    #[test]
    fn save_load_round_trip_and_missing_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut init = Initializer::new(3);
        let mut store = ParamStore::new();
        store.insert("x.w", init.normal(&[2, 3], 1.0).unwrap());
        store.insert("x.b", init.uniform(&[3], 0.5).unwrap());
        store.save_dir(dir.path()).unwrap();
        let back = ParamStore::load_dir(dir.path(), &store).unwrap();
        assert_eq!(back, store);
        std::fs::remove_file(tensor_file(dir.path(), "x.b")).unwrap();
        let err = ParamStore::load_dir(dir.path(), &store).unwrap_err();
        assert!(err.to_string().contains("x.b"));
    }
}
