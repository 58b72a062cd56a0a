use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered collection of named parameter tensors.
///
/// Storage is reference counted so a [`Graph`](super::Graph) can bind every
/// parameter as a leaf without copying. Mutation goes through
/// [`ParamStore::get_mut`], which copies only if a graph still holds a
/// reference.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: Vec<Arc<Tensor>>,
    names: Vec<String>,
}

/// Truncated normal (±2σ) initializer.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.tensors.push(Arc::new(value));
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::Config(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.names[id.0],
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub(crate) fn shared(&self) -> &[Arc<Tensor>] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn to_snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            params: self
                .ids()
                .map(|id| NamedTensor {
                    name: self.names[id.0].clone(),
                    shape: self.get(id).shape().to_vec(),
                    data: self.get(id).data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrite values from a snapshot taken from an identically built store.
    pub fn load_snapshot(&mut self, snap: &ParamSnapshot) -> Result<()> {
        if snap.params.len() != self.len() {
            return Err(Error::Format(format!(
                "snapshot has {} tensors, model has {}",
                snap.params.len(),
                self.len()
            )));
        }
        for (id, p) in self.ids().collect::<Vec<_>>().into_iter().zip(&snap.params) {
            if p.name != self.names[id.0] {
                return Err(Error::Format(format!(
                    "snapshot tensor {} does not match parameter {}",
                    p.name, self.names[id.0]
                )));
            }
            self.set(id, Tensor::new(&p.shape, p.data.clone())?)?;
        }
        Ok(())
    }
}

/// Serializable copy of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub params: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
