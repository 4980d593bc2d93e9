//! Backbone-guided multi-task image restoration.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod degradation;
pub mod dr_fusion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod objective;
pub mod params;
pub mod procedural;
pub mod psf;
pub mod restoration;
pub mod trainer;

pub use error::{Error, Result};
