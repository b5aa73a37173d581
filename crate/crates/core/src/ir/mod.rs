//! Model intermediate representation.

mod fold;
pub(crate) mod io;
mod layer;
mod model;
mod tensor;
pub mod topology;

pub use fold::fold_norm;
pub use io::{load, save, MANIFEST};
pub use layer::{Conv2d, Dense, LayerKind, LayerSpec, LayerTag, Norm};
pub use model::{Model, NeuronRef, Rule, Violation};
pub use tensor::{Tensor, MAX_RANK};
pub use topology::{Channel, ChannelSpace, Slot, Topology};
