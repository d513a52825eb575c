//! Sketch-guided tumor progression editing for medical image slices.
//!
//! The core is generic over the scalar type; `f32` aliases are provided for
//! everyday use and `f64` ones for numerical checks.

pub mod bundle;
pub mod data;
pub mod edit;
pub mod error;
pub mod eval;
pub mod filters;
pub mod ldm;
pub mod mask_ops;
pub mod metrics;
pub mod morphology;
pub mod nn;
pub mod pipeline;
pub mod png_io;
pub mod raster;
pub mod refiner;
pub mod scalar;
pub mod sketch;
pub mod vae;
mod train_util;

pub use error::{Error, Result};
pub use raster::{BinaryImage, Raster};
pub use scalar::Scalar;

pub type Image = Raster<f32>;
pub type Image64 = Raster<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
