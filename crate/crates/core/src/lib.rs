//! Evidential inference learning for semi-supervised segmentation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod evidential;
pub mod loss;
pub mod nn;
pub mod npy;
pub mod run;
pub mod special;
pub mod trainer;

pub use error::{EvilError, Result};
