//! Bilinear attention at desk scale.
//!
//! The crate implements low-rank bilinear pooling, bilinear attention maps,
//! residual glimpse stacking, the unitary and co-attention baselines, and a
//! small training stack (Adamax, schedule, clipping, weight normalization,
//! dropout) over a self-contained float64 tensor core with reverse-mode
//! automatic differentiation. A synthetic multimodal task plus oracle and
//! gradient checks make the whole pipeline verifiable on a laptop.

pub mod attention;
pub mod embed;
pub mod error;
pub mod model;
pub mod pooling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
