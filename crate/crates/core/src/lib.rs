//! Crystal generation with a transformer denoiser over tokens, coordinates and lattice.

pub mod crystal;
pub mod elements;
pub mod error;
pub mod tokenizer;

pub use crystal::{Crystal, Lattice, LatticeLatent};
pub use error::{Error, Result};
pub mod edm;
pub mod gem;
pub mod nn;
pub mod model;
pub mod train;
pub mod dataset;
pub mod sampler;
pub mod evaluation;
pub mod config;
pub mod checkpoint;
