//! Joint-embedding predictive pre-training for single-cell expression data.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod experiment;
pub mod metrics;
pub mod objectives;
pub mod scalar;
pub mod trainer;

pub use autodiff::{Graph, Tensor, Var};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
