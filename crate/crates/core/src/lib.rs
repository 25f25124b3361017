//! Hierarchical similarity graph module (HSGM) and a desk-scale
//! re-identification pipeline built on a small reverse-mode tensor library.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod hsgm;
pub mod io;
pub mod losses;
pub mod network;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
