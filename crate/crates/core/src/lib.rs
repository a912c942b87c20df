//! Evolutionary channel and head pruning with least-squares reconstruction.

pub mod error;
pub mod evolve;
pub mod netgraph;
pub mod prunespace;
pub mod reconstruct;
pub mod tensor;

pub use error::{Error, Result};
pub use netgraph::{NetworkGraph, WeightStore};
pub use tensor::{RngStream, Tensor};
