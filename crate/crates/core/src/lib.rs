pub mod coarse;
pub mod config;
mod container;
pub mod error;
pub mod face_model;
pub mod makeup;
pub mod mesh;
pub mod optim;
pub mod pca;
pub mod pipeline;
pub mod refine;
pub mod shading;
pub mod texture;

pub use error::{Error, Result};
