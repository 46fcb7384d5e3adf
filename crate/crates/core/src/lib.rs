//! Source-free active domain adaptation for binary segmentation.

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod projection;
pub mod reference;
pub mod rng;
pub mod segmenter;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
