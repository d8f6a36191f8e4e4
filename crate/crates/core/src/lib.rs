//! Multi-task training of captioning and scene-graph heads over a shared feature
//! extractor, with contrastive class-incremental pretraining and LoG curriculum smoothing.

pub mod autograd;
pub mod curriculum;
pub mod error;
pub mod experiments;
pub mod fsio;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::Tensor;
