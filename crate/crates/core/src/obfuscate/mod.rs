//! Dummy-neuron injection and camouflage.

mod camouflage;
mod campaign;
mod config;
mod plan;
mod primitives;

pub use camouflage::{inverse, is_permutation, kernel_expand, permute_layer, rescale_neuron, ExpandMode};
pub use campaign::{inject_campaign, replay};
pub use config::{Mix, ObfuscationConfig, Primitive, ZeroSide};
pub use plan::{DummyGroup, KernelPadding, LayerGrowth, LayerPermutation, ObfuscationPlan};
pub use primitives::{clique_generate, neuron_clique_inject, neuron_split, neuron_zero_inject};
