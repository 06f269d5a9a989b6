//! Slice-to-volume reconstruction with factorized neural fields.

pub mod checkpoint;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
