//! Unified latent world model and planner on a synthetic bird's-eye-view
//! driving world.

pub mod config;
pub mod error;
pub mod model;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
