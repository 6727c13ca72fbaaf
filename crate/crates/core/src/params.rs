//! Named parameter storage shared by every module of the network.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T: Scalar> {
    name: String,
    value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f64> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.into(),
            value: value.with_requires_grad(true),
        });
        id
    }

    /// Uniform initialisation in `±1/√fan_in`.
    pub fn add_fan_in(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Replace a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim("param set", entry.value.shape(), value.shape()));
        }
        let grad = entry.value.grad.take();
        entry.value = value.with_requires_grad(true);
        entry.value.grad = grad;
        Ok(())
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if grad.len() != entry.value.len() {
            return Err(Error::shape(
                "param grad",
                format!(
                    "`{}` has {} values, grad has {}",
                    entry.name,
                    entry.value.len(),
                    grad.len()
                ),
            ));
        }
        entry.value.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.grad = None;
        }
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast::<U>().with_requires_grad(true),
                })
                .collect(),
        }
    }

    /// One `<name>.t3tn` file per parameter.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for e in &self.entries {
            e.value.save(dir.join(format!("{}.t3tn", e.name)))?;
        }
        Ok(())
    }

    /// Load every parameter from `dir`; names and shapes must match.
    pub fn load_dir(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for i in 0..self.entries.len() {
            let path = dir.join(format!("{}.t3tn", self.entries[i].name));
            let t = Tensor::load(&path)?;
            self.set(ParamId(i), t)?;
        }
        Ok(())
    }
}
