//! Named parameters, Adam, and checkpoint directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Parameters recorded on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs names with variables already on a tape.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn gradients(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, store.params[k].shape())))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    shape: Vec<usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf (`trainable`) or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Writes one tensor file per parameter and an `index.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = BTreeMap::new();
        for (name, t) in &self.params {
            let file = format!("{name}.dvdt");
            t.save(dir.join(&file))?;
            index.insert(
                name.clone(),
                IndexEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BTreeMap<String, IndexEntry> = serde_json::from_str(&text)?;
        let mut params = BTreeMap::new();
        for (name, entry) in index {
            let t = Tensor::load(dir.join(&entry.file))?;
            if t.shape() != entry.shape {
                return Err(Error::shape(
                    "checkpoint",
                    name,
                    format!("{:?}", entry.shape),
                    format!("{:?}", t.shape()),
                ));
            }
            params.insert(name, t);
        }
        Ok(ParamStore { params })
    }
}

/// Draws initial values; one generator per model so layouts stay reproducible.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-style normal init for a `[C_out, C_in, k, k]` kernel, scaled by `gain`.
    pub fn conv(&mut self, co: usize, ci: usize, k: usize, gain: f64) -> Tensor {
        let std = gain * (2.0 / (ci * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(&[co, ci, k, k], |_| normal.sample(&mut self.rng))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::invalid("adam", format!("non-finite gradient for `{name}`")));
        }
        self.step += 1;
        let c = self.cfg;
        let b1 = 1.0 - c.beta1.powi(self.step as i32);
        let b2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::invalid("adam", format!("unknown parameter `{name}`")))?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                *pi -= c.lr * (*mi / b1) / ((*vi / b2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..400 {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape, true);
            let x = b.get("x").unwrap();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq).unwrap();
            let g = tape.backward(loss).unwrap();
            let grads = b.gradients(&g, &store);
            opt.step(&mut store, &grads).unwrap();
        }
        assert!(store.get("x").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("enc.0.w", Init::new(1).conv(4, 3, 3, 1.0));
        store.insert("dec.b", Tensor::zeros(&[3]));
        store.save(dir.path()).unwrap();
        assert_eq!(ParamStore::load(dir.path()).unwrap(), store);
    }
}
