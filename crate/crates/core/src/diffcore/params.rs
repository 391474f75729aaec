use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named, insertion-ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±1/√fan_in`, with `fan_in` the row count.
    FanIn,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds a parameter initialised from a stream keyed by its own name, so
    /// the values do not depend on which other parameters exist.
    pub fn init(&mut self, name: &str, rows: usize, cols: usize, init: Init, seed: u64) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(rows, cols),
            Init::Constant(c) => Tensor::filled(rows, cols, c),
            Init::FanIn => {
                let mut rng = RngStream::new(seed).child(name);
                let bound = 1.0 / (rows.max(1) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.uniform_range(-bound, bound)).collect();
                Tensor::new(rows, cols, data)?
            }
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// ‖θ‖²₂ over all parameters.
    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.sum_of_squares()).sum()
    }

    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.value(id).clone()).collect()
    }

    pub fn restore(&mut self, ids: &[ParamId], values: &[Tensor]) {
        for (&id, v) in ids.iter().zip(values) {
            self.params[id.0].value = v.clone();
        }
    }

    /// Overwrites values from `other` wherever names match. Shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut loaded = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                let dst = &mut self.params[id.0].value;
                if dst.shape() != p.value.shape() {
                    return Err(Error::Dimension {
                        op: "load_params",
                        left: dst.shape(),
                        right: p.value.shape(),
                    });
                }
                *dst = p.value.clone();
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    pub fn to_params(&self) -> Vec<Param> {
        self.params.clone()
    }

    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        let mut store = ParamStore::new();
        for p in params {
            store.add(&p.name, p.value)?;
        }
        Ok(store)
    }
}
