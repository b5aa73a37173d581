use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ObfuscationConfig, Primitive, ZeroSide};
use crate::error::{Error, Result};
use crate::ir::NeuronRef;

/// One injected group of dummy neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DummyGroup {
    /// First producer layer of the channel space the group lives in.
    pub layer_id: u32,
    pub kind: Primitive,
    /// Channel positions in the final model. For Split the replacement of
    /// the original neuron comes last.
    pub member_indices: Vec<usize>,
    /// Zero: group size; Clique: member count; Split: added dummies.
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced_neuron: Option<NeuronRef>,
    /// Rescaling factor applied to each member (1 when not rescaled).
    pub scales: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_side: Option<ZeroSide>,
}

impl DummyGroup {
    /// Members that did not exist in the original model. A Split's
    /// replacement neuron is modified, not added, and is excluded.
    pub fn added(&self) -> &[usize] {
        match self.kind {
            Primitive::Split => &self.member_indices[..self.member_indices.len() - 1],
            _ => &self.member_indices,
        }
    }

    pub(crate) fn remap(&mut self, perm: &[usize]) {
        let inv = super::camouflage::inverse(perm);
        self.member_indices.iter_mut().for_each(|i| *i = inv[*i]);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPermutation {
    pub layer_id: u32,
    /// New channel `i` is old channel `perm[i]`.
    pub perm: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelPadding {
    pub layer_id: u32,
    pub kh: usize,
    pub kw: usize,
    pub pad: (usize, usize),
}

/// Width change of one channel space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGrowth {
    pub layer_id: u32,
    pub before: usize,
    pub after: usize,
}

/// The attacker's private record of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationPlan {
    pub seed: u64,
    pub alpha: f64,
    pub config: ObfuscationConfig,
    /// Ordered from the last hidden layer to the first.
    pub groups: Vec<DummyGroup>,
    pub growth: Vec<LayerGrowth>,
    pub permutations: Vec<LayerPermutation>,
    pub paddings: Vec<KernelPadding>,
}

impl ObfuscationPlan {
    pub fn groups_in(&self, layer_id: u32) -> impl Iterator<Item = &DummyGroup> {
        self.groups.iter().filter(move |g| g.layer_id == layer_id)
    }

    /// Final positions of added dummies in a layer, with their primitive.
    pub fn dummies(&self, layer_id: u32) -> Vec<(usize, Primitive)> {
        let mut v: Vec<(usize, Primitive)> = self
            .groups_in(layer_id)
            .flat_map(|g| g.added().iter().map(move |&i| (i, g.kind)))
            .collect();
        v.sort();
        v
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::format(path, e.to_string()))
    }
}
