//! Sinkhorn band-to-slot alignment, fused mixture-of-experts operators and
//! step-level dynamic task weighting, with a deterministic desk-scale
//! multi-task restoration harness built on a small reverse-mode tape.

pub mod align;
pub mod autodiff;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod moe;
pub mod mtl;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod text;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
