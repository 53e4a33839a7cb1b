//! A small set of differentiable layers with hand-written backward passes,
//! AdamW, and a finite-difference gradient checker.

pub mod adamw;
pub mod encoder;
pub mod gradcheck;
pub mod layer;
pub mod norm;
pub mod params;

pub use adamw::{adamw_step, AdamW, AdamWConfig};
pub use encoder::{Encoder, EncoderCache, EncoderConfig};
pub use gradcheck::{grad_check, Evaluation, GradCheckConfig, GradCheckReport};
pub use layer::{Layer, LayerCache, LayerSpec, Mode, NormConfig};
pub use params::{Grads, ParamId, ParamStore, Tensor};
