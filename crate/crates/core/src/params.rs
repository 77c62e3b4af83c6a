//! Named parameter storage with freeze groups.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, Result};
use crate::math;
use crate::tensor::Tensor;

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Freeze group a parameter belongs to. The training stages toggle
/// `requires_grad` per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Toy vision encoder weights. Frozen in both stages.
    Pyramid,
    /// Query grid, fusion projections, per-scale projectors, the map into
    /// the decoder embedding space. Trainable in both stages.
    Fusion,
    /// Per-layer visual re-alignment maps. Trainable in stage 2.
    Realign,
    /// Low-rank adapters. Trainable in stage 2.
    Lora,
    /// Decoder base weights. Frozen in both stages.
    Decoder,
}

struct Entry {
    name: String,
    group: ParamGroup,
    tensor: Tensor,
}

/// Registration-ordered collection of named tensors.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, tensor: Tensor) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        self.entries.push(Entry {
            name: String::from(name),
            group,
            tensor,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Set `requires_grad` from a per-group predicate.
    pub fn set_trainable(&mut self, trainable: impl Fn(ParamGroup) -> bool) {
        for e in &mut self.entries {
            e.tensor.requires_grad = trainable(e.group);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.get(id).requires_grad)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Global L2 norm over gradients of trainable tensors.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for e in &self.entries {
            if !e.tensor.requires_grad {
                continue;
            }
            if let Some(g) = &e.tensor.grad {
                sq += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        math::sqrt(sq)
    }

    /// Scale all trainable gradients in place.
    pub fn scale_grads(&mut self, factor: f64) {
        for e in &mut self.entries {
            if !e.tensor.requires_grad {
                continue;
            }
            if let Some(g) = &mut e.tensor.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}
