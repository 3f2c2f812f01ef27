//! Stable Diffusion and SAM adapters for the propagation pipeline.

pub mod backend;
pub mod sam;
pub mod text;
pub mod unet;
pub mod vae;

pub use backend::{DiffusionBackend, DiffusionParts, ModelFiles, ModelSpec, Prediction, VaeSpec};
pub use sam::{SamFactory, SamSegmenter};

pub(crate) fn be(e: candle::Error) -> attnprop_core::Error {
    attnprop_core::Error::Backend(e.to_string())
}
