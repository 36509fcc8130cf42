//! Region-based salient object detection.

pub mod backbone;
pub mod bundle;
pub mod config;
mod container;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod fusion;
pub mod handcrafted;
pub mod imaging;
pub mod metrics;
pub mod mlp;
pub mod pipeline;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
