//! Dense edge-based monocular depth estimation with graph-matching
//! candidate weighting, on synthetic pinhole scenes.

pub mod dgde;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gmw;
pub mod harness;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
