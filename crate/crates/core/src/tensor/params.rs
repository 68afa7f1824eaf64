use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    /// Non-trainable parameters (frozen weights, running statistics) enter
    /// the tape as constants and are skipped by the optimizer.
    pub trainable: bool,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(id))
    }

    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data)?, true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(rows, cols), true)
    }

    /// Identity plus Uniform(-noise, noise) perturbation.
    pub fn near_identity<R: Rng>(
        &mut self,
        name: impl Into<String>,
        d: usize,
        noise: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut t = Tensor::identity(d);
        for x in t.data_mut() {
            *x += rng.gen_range(-noise..noise);
        }
        self.add(name, t, true)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Sets the trainable flag on every parameter whose name starts with
    /// `prefix`, except running statistics which are never trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) && !is_running_stat(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    /// SHA-256 over names, shapes and value bits of parameters whose name
    /// starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values from `other` into every parameter whose name starts
    /// with `prefix`. Fails when a name is missing or shapes differ.
    pub fn load_values(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .id(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::VersionMismatch(format!("missing parameter {}", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::VersionMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }
}

pub(crate) fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}
