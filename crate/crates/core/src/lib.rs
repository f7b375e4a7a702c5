//! Blind iris restoration with an embedded GAN prior, plus a residual
//! bottleneck iris classifier, at desk scale.
//!
//! The crate covers the full path from synthetic or on-disk iris crops,
//! through the degradation model and the restoration/recognition
//! networks, to the staged training protocol and evaluation metrics.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
