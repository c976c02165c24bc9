//! Cross-modal representational distillation from PPG to accelerometry:
//! synthetic paired data, pre-training, distillation and evaluation.

pub mod augment;
pub mod cl;
pub mod dataset;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod mae;
pub mod model;
pub mod pipeline;
pub mod supervised;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
