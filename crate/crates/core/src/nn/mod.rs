//! Minimal tensor and reverse-mode autodiff engine used by the text encoder
//! and the denoiser. Generic over `f32` (training, inference) and `f64`
//! (gradient verification).

mod adam;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{Grads, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

