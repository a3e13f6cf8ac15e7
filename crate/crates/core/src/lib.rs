#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod env;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imaging;
pub mod layers;
pub mod models;
mod linalg;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod solvability;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{BnMode, Graph, Var};
pub use params::ParameterSet;
pub use tensor::Tensor;
