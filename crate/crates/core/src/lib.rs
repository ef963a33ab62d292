//! Meta-optimized continual learning: a transformer-based learned optimizer that
//! selectively updates classifier convolution weights from gradient-derived
//! importance scores, trained over a stream of few-shot tasks.

pub mod baselines;
pub mod error;
pub mod experiment;
pub mod importance;
pub mod layers;
pub mod meta_optimizer;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod seeding;
pub mod streams;
pub mod trainer;

pub use error::{CoreError, Result};
pub use mocl_autodiff::{Real, Tensor};
