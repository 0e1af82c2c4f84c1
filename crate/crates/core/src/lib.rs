//! Longitudinal chest-image report generation with prior-aware encoders.

pub mod backbone;
pub mod config;
pub mod ddam;
pub mod decoder;
pub mod dfam;
pub mod encoder;
pub mod harness;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod text;
pub mod vocab;

pub use error::{ModelError, Result};
