//! Differentiable hierarchical architecture search for semantic
//! segmentation: a small reverse-mode tensor engine, the relaxed cell and
//! trellis search space, bi-level search, genotype decoding, the derived
//! encoder with an adaptive FPN decoder, and an analytic cost model.

pub mod checks;
pub mod cost;
pub mod data;
pub mod decode;
pub mod derived;
pub mod error;
pub mod nn;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
