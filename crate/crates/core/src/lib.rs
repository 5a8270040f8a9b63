//! Parameter-free spatial-temporal attention for video person re-identification.
//!
//! A clip of `N` frame feature maps is turned into per-frame energy maps,
//! split into `K` horizontal regions, scored, and fused into one clip feature
//! by keeping the most attended frame per region alongside a score-weighted
//! average. The crate also carries a small trainable backbone, the training
//! losses, Adam, a synthetic occlusion benchmark and retrieval metrics.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod par;

pub use error::{Result, StaError};
