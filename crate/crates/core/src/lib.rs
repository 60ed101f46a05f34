//! Bundle recommendation with Gaussian node embeddings, two-view graph
//! propagation, cross-view contrast and OT-assigned prototypes.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); training and
//! checkpoints use `f64`. Recall is also available as an exact ratio.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod objectives;
pub mod prototypes;
pub mod scalar;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Exact metric values.
pub type Rational = num_rational::Ratio<u64>;

pub type Model = model::GpclModel<f64>;
pub type Model32 = model::GpclModel<f32>;
pub type TrainState = trainer::TrainState<f64>;
pub type Graphs = model::ModelGraphs<f64>;
pub type Views = objectives::ViewEmbeddings<f64>;
