//! Mesh-density super-resolution for 2D stress fields.
//!
//! The crate is organized around a small deterministic tensor core with
//! reverse-mode automatic differentiation ([`gridmath`]), synthetic
//! low/high mesh-density field generators ([`fieldgen`]), the
//! SuperMeshingNet encoder-decoder with channel/spatial attention
//! ([`smnet`]), its three-part loss ([`losses`]), the training loop
//! ([`trainer`]) and the metrics / time-cost reporting ([`evaluator`]).

pub mod error;
pub mod evaluator;
pub mod fieldgen;
pub mod gridmath;
pub mod losses;
pub mod smnet;
pub mod trainer;

pub use error::{Error, Result};
