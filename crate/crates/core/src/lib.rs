//! Coverage-prediction pipeline: scene model, 2D ray-launching oracle,
//! frame extraction and model training.

pub mod datapipe;
mod error;
pub mod raytrace;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use radiomap_nn as nn;
