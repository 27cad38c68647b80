//! Detector-free local feature matching with spot-guided sparse attention,
//! dual-softmax coarse matching and depth-adaptive fine refinement.

pub mod aggregation;
pub mod attention;
pub mod checkpoint;
pub mod coarse;
pub mod config;
pub mod error;
pub mod fine;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod params;
pub mod pyramid;
pub mod scalar;
pub mod sparse;
pub mod spot;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Level, Tensor};

/// Scalar used by the command-line tools and verification suites.
pub type Real = f64;
/// Scalar used for training.
pub type TrainReal = f32;
pub type Params = model::ModelParams<Real>;
pub type TrainParams = model::ModelParams<TrainReal>;
