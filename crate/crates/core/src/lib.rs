//! Global-feature self-guided network (GSGN) and its task-adaptive variant
//! for example-based image enhancement.
//!
//! The crate carries its own small tensor engine with reverse-mode
//! differentiation ([`graph`]), the network building blocks ([`layers`]), the
//! assembled generator, critic and classifier ([`models`]), every training
//! objective ([`losses`]), fidelity metrics ([`metrics`]), dataset handling
//! ([`data`]) and the supervised and unpaired training procedures
//! ([`training`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod params;
pub mod gradcheck;
pub mod inference;
mod kernels;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Reduce, Var};
pub use tensor::{Scalar, Tensor};
