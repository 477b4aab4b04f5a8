//! Named parameter/buffer storage. Parameters are trainable; buffers (batch
//! norm running statistics) are saved and restored but never optimized.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry<E> {
    name: String,
    tensor: Tensor<E>,
    trainable: bool,
}

pub struct ParamStore<E: Float> {
    entries: Vec<Entry<E>>,
}

impl<E: Float> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Float> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<E>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            tensor,
            trainable: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Exact count of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Trainable scalars restricted to names passing `pred`.
    pub fn trainable_scalars_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && pred(&e.name))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<F: Float>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }

    pub fn clone_store(&self) -> ParamStore<E> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.clone(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Samples from Normal(0, std) truncated at +/- 2 std.
pub fn init_trunc_normal<E: Float>(dims: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<E>> {
    if dims.is_empty() || dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArg(format!(
            "init_trunc_normal: dims must be positive, got {:?}",
            dims
        )));
    }
    if std <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "init_trunc_normal: std must be > 0, got {std}"
        )));
    }
    Ok(Tensor::from_fn(dims, |_| {
        E::from_f64(rng.trunc_normal(std))
    }))
}
