//! Numerics, model components and objectives for hybrid-resolution
//! video-language pre-training.
//!
//! Every component is generic over [`Scalar`] (`f32` or `f64`); the `*F32`
//! aliases below name the single-precision instantiations used by the runtime.

pub mod error;
pub mod genmap;
pub mod metrics;
pub mod model;
pub mod multimodal;
pub mod nn;
pub mod numerics;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod sampling;
pub mod scalar;
pub mod text;
pub mod video;

pub use error::{Error, Result};
pub use numerics::{AttentionLayout, Tape, Tensor, Var};
pub use optim::{lr_schedule, AdamW, AdamWConfig};
pub use params::ParamStore;
pub use scalar::Scalar;

pub type TensorF32 = Tensor<f32>;
pub type TapeF32 = Tape<f32>;
pub type ParamStoreF32 = ParamStore<f32>;
pub type AdamWF32 = AdamW<f32>;
pub type TensorF64 = Tensor<f64>;
pub type TapeF64 = Tape<f64>;
