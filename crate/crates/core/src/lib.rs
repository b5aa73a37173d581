//! Structural obfuscation of neural networks by dummy-neuron injection,
//! the white-box watermark schemes it defeats, and the defenses against it.
//!
//! Every algorithm is generic over the element type through [`Scalar`];
//! the aliases below fix the two supported widths.

pub mod defense;
pub mod error;
pub mod inference;
pub mod ir;
pub mod obfuscate;
pub mod rng;
pub mod scalar;
pub mod verify;
pub mod watermark;
pub mod zoo;

pub use error::{Error, Result};
pub use inference::{equivalence_check, forward, forward_with_trace, ActivationTrace, EquivalenceReport};
pub use ir::{fold_norm, load, save, LayerKind, LayerSpec, Model, NeuronRef, Tensor, Topology};
pub use scalar::Scalar;

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
