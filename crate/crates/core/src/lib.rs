//! Generator-based transferable adversarial attacks on person re-identification
//! embedders, with meta-learning across datasets and a saliency input mask.

pub mod attack;
pub mod dataset;
pub mod error;
pub mod meta_trainer;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod retrieval_eval;
pub mod saliency_mask;

pub use error::{Error, Result};
pub use candle_core::{Device, Tensor};
