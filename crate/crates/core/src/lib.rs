//! Visual in-context learning with a small flow-matching transformer.
//!
//! Given an exemplar pair `(x_s, x_t)` and a query `x_q`, the model samples
//! `y_q` by integrating a learned velocity field conditioned on all three
//! images. Adapters (LoRA and a routed mixture of LoRA experts) let new tasks
//! be learned on top of a frozen base.

pub mod adapters;
pub mod backbone;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod mining;
pub mod numerics;
pub mod params;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
