//! Segmentation-guided ("forced") attention for multimodal video transformers.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the model and
//! training stack run in `f64`, exposed through the aliases below.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod forced;
pub mod fusion;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod model;
pub mod params;
pub mod patching;
pub mod pgm;
pub mod scalar;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelInput};
pub use params::{Group, ParamGrads, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64<'p> = Graph<'p, f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model64 = Model<f64>;
