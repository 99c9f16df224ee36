use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

/// Named trainable arrays, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix) {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        self.entries.insert(name.into(), Param { value, grad });
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Whether gradients from a backward pass are waiting to be consumed.
    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn begin_backward(&mut self) -> Result<()> {
        if self.grads_ready {
            return Err(Error::DoubleBackward);
        }
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = true;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &DenseMatrix) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter '{name}'")))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::shape(format!("gradient shape for '{name}'")));
        }
        p.grad.add_scaled(1.0, g);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        StoredArray {
                            shape: [p.value.rows(), p.value.cols()],
                            values: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, arr) in ckpt.params {
            store.insert(name, DenseMatrix::from_vec(arr.shape[0], arr.shape[1], arr.values)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string(&self.to_checkpoint())?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = crate::io::read_artifact(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

/// Version-tagged JSON checkpoint: name -> shape -> row-major values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, StoredArray>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredArray {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}
