//! Multi-relational graph convolution over images.
//!
//! Images become nodes of a multigraph whose edges are derived from metadata
//! equality (same patient, age, gender, view). Each relation passes messages
//! through a convolutional trunk and a per-relation linear head; messages are
//! aggregated with symmetric-normalized coefficients and trained end-to-end
//! for multi-label classification. The self-connection head doubles as a
//! class-activation-map generator for weakly supervised localization.
//!
//! All numeric kernels are generic over the [`Real`] scalar. `f64` is the
//! default and the only mode with a bit-exact determinism contract; `f32`
//! trades that for speed. Concrete aliases live at the crate root.

pub mod compute;
pub mod dataio;
pub mod error;
pub mod localize;
pub mod metrics;
pub mod model;
pub mod relgraph;
pub mod sampler;
pub mod scalar;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type SparseMatrix64 = sparse::SparseMatrix<f64>;
pub type SparseMatrix32 = sparse::SparseMatrix<f32>;

pub type RelationGraph64 = relgraph::RelationGraph<f64>;
pub type RelationGraph32 = relgraph::RelationGraph<f32>;

pub type Subgraph64 = sampler::Subgraph<f64>;
pub type Subgraph32 = sampler::Subgraph<f32>;

pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
