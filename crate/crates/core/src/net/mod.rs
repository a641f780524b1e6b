//! Trainable networks over the search space.

pub mod discrete;
pub mod ops;
pub mod supernet;

pub use discrete::DiscreteNet;
pub use ops::{op_forward, ConvBlock, OpWeights};
pub use supernet::{cell_forward, head_forward, stem_forward, ArchInputs, CellWidth, Supernet};
