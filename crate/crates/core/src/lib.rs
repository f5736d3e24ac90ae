//! Pixel-space diffusion transformer training with pluggable representation
//! alignment: no alignment, a token-wise MLP projection, or a masked
//! two-block transformer adapter.

pub mod alignment;
pub mod analysis;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
mod kernels;
pub mod nn;
pub mod params;
pub mod run;
pub mod sampler;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
