//! Hybrid 3D CNN/Transformer volumetric segmentation built on a small
//! reverse-mode autodiff engine.

pub mod checks;
pub mod cli;
pub mod complexity;
pub mod config;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
