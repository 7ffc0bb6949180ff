//! Semi-supervised severity classification and attention-based localization,
//! trained with a student/teacher pair kept in sync by exponential moving
//! averages and coupled through dual consistency penalties on class
//! probabilities and attention masks.
//!
//! Everything is self-contained: n-d tensors with reverse-mode autodiff, a
//! small two-head CNN, a synthetic band-defect dataset with dilated
//! segmentation masks, Adam, checkpointing, and the evaluation metric suite.

pub mod audit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ema;
pub mod error;
pub mod losses;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use model::{ModelPair, NetworkConfig, ParamSet};
pub use tensor::Tensor;
