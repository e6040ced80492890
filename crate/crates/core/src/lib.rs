//! Cascaded canonicalization pipeline for visual anomaly detection.
//!
//! Photometric normalization, a gated dual-path bottleneck and a
//! linear-attention decoder, trained on a synthetic inspection simulator and
//! driven by an uncertainty-based active pose policy.

pub mod bottleneck;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod photometric;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
