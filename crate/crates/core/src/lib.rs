//! Multi-model slide representation learning on a shared spatial grid.

pub mod archive;
pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod float;
pub mod grid;
pub mod layers;
pub mod model;
pub mod params;
pub mod render;
pub mod routing;
pub mod sampling;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod text;

pub use error::{AstraError, Result};
