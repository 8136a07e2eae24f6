pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod geometry;
pub mod guidance;
pub mod image;
pub mod nn;
pub mod ocr;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod textcodec;

pub use error::{Error, Result};
pub use image::ImagePlane;
