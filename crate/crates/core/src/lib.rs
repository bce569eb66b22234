//! Sparse-dense mixture-of-experts adapters and Gram-aligned hypergraph
//! fusion for two-modality object tracking, with a small from-scratch
//! differentiation engine and a synthetic training harness.

pub mod error;
pub mod gsahf;
pub mod harness;
pub mod losses;
pub mod moe;
pub mod numerics;

pub use error::{Error, Result};
pub use losses::{BBox, LossBundle, LossWeights};
pub use moe::{RouterDecision, SdMoeConfig};
pub use numerics::{Graph, ParamStore, RngStream, Tensor, Var};
