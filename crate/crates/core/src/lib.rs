//! Training, permutation alignment and merging of small ReLU classifiers,
//! with the loss-landscape diagnostics used to compare merge methods.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the 32-bit working precision used by the tools.

pub mod align;
pub mod assignment;
pub mod condense;
pub mod data;
pub mod error;
pub mod landscape;
pub mod nnet;
pub mod scalar;
pub mod train;

pub use align::{AlignConfig, PermutationSet, SteConfig};
pub use assignment::{solve_lap, Permutation, Sense};
pub use condense::{CondenseConfig, GradDistance};
pub use error::{Error, Result};
pub use landscape::{MergeMetrics, SweepReport};
pub use nnet::MlpSpec;
pub use scalar::Scalar;
pub use train::{Checkpoint, Metrics, TrainConfig};

pub type Params = nnet::MlpParams<f32>;
pub type Grad = nnet::GradBundle<f32>;
pub type Data = data::Dataset<f32>;
pub type Condensed = data::CondensedDataset<f32>;
pub type Mixed<'a> = data::MixedDataset<'a, f32>;
pub type Fisher = landscape::FisherDiagonal<f32>;
