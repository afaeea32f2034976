pub mod ablation;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod synthgen;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
