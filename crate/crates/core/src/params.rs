//! Named parameter storage shared by every model component.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Accounting bucket a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Vit,
    Decoder,
    GatedBlocks,
    Projector,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Vit, Bucket::Decoder, Bucket::GatedBlocks, Bucket::Projector];

    /// Trainability group used by the stage freeze table.
    pub fn group(self) -> TrainGroup {
        match self {
            Bucket::Vit => TrainGroup::Vit,
            Bucket::Decoder => TrainGroup::Llm,
            Bucket::GatedBlocks | Bucket::Projector => TrainGroup::Bridge,
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Vit => "vit",
            Bucket::Decoder => "decoder",
            Bucket::GatedBlocks => "gated_blocks",
            Bucket::Projector => "projector",
        })
    }
}

/// Parameter groups that a training stage switches on or off as a unit.
///
/// `Bridge` covers the gated cross-attention blocks together with the
/// feature projector and the tile position tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainGroup {
    #[serde(rename = "vit")]
    Vit,
    #[serde(rename = "gated_blocks+projector")]
    Bridge,
    #[serde(rename = "llm")]
    Llm,
}

impl TrainGroup {
    pub const ALL: [TrainGroup; 3] = [TrainGroup::Vit, TrainGroup::Bridge, TrainGroup::Llm];

    pub fn name(self) -> &'static str {
        match self {
            TrainGroup::Vit => "vit",
            TrainGroup::Bridge => "gated_blocks+projector",
            TrainGroup::Llm => "llm",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown component `{name}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
    pub bucket: Bucket,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, bucket: Bucket, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad, requires_grad: true, bucket });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a value with a tensor of a possibly different shape; the
    /// gradient slot is reset to match.
    pub fn replace_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Parameters in ascending name order.
    pub fn iter_sorted(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.by_name.values().map(|&id| (id, self.get(id)))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn set_requires_grad(&mut self, f: impl Fn(&Param) -> bool) {
        for p in &mut self.params {
            p.requires_grad = f(p);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect()
    }

    pub fn count(&self, bucket: Bucket) -> usize {
        self.params.iter().filter(|p| p.bucket == bucket).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
