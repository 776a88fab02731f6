//! Spatial structure of mixture-of-experts routing.
//!
//! - [`trace`]: routing traces, their NDJSON format and the uniform-random baseline
//! - [`stats`]: activation rates, block variables, domains, correlation lengths, scaling fits
//! - [`chain`]: a 1D Potts chain surrogate with exact transfer-matrix correlation length
//! - [`mem`]: exact k-subset state distributions and the maximum-entropy auxiliary loss
//! - [`toy`]: a small RoPE + top-k MoE transformer with manual backpropagation
//! - [`probe`]: position targets, a multinomial logistic probe and its metrics
//! - [`report`]: CSV and SVG output

pub mod chain;
pub mod error;
pub mod mem;
pub mod probe;
pub mod report;
pub mod stats;
pub mod toy;
pub mod trace;

pub use error::{Error, Result};
