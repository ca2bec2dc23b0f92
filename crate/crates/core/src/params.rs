//! Named parameter storage shared by the backbone, prompt modules and head.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SspError};
use crate::tensor::{encode_tensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Which part of the model a tensor belongs to; freeze policies act on groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Patch embedding, cls token and Mamba layers.
    Backbone,
    /// Intra-frame gathering module, including the entropy scale α.
    Ifg,
    /// Inter-frame spreading modules, including their scales β.
    Ifs,
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.tensor.shape() != tensor.shape() {
            return Err(SspError::dim(format!(
                "parameter {} has shape {:?}, replacement has {:?}",
                e.name,
                e.tensor.shape(),
                tensor.shape()
            )));
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Put every tensor on `tape` as a leaf; `trainable[i]` sets `requires_grad`.
    pub fn bind(&self, tape: &mut Tape, trainable: &[bool]) -> Bound {
        assert_eq!(trainable.len(), self.entries.len());
        Bound(
            self.entries
                .iter()
                .zip(trainable)
                .map(|(e, &t)| tape.leaf(e.tensor.clone(), t))
                .collect(),
        )
    }

    /// Bind with nothing trainable (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, &vec![false; self.entries.len()])
    }

    /// SHA-256 of the serialized tensor, hex encoded.
    pub fn tensor_hash(&self, id: ParamId) -> String {
        hex::encode(Sha256::digest(encode_tensor(self.get(id))))
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wrap handles already placed on a tape, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}
