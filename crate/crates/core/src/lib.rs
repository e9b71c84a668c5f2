//! Task-progressive pre-training for task-oriented dialog on a from-scratch
//! encoder-decoder, with the corpus, training, evaluation and run plumbing around it.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f32` or `f64`.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod sampler;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Weights32 = model::Weights<f32>;
pub type Weights64 = model::Weights<f64>;
pub type PolicyEncoders32 = model::PolicyEncoders<f32>;
pub type PolicyEncoders64 = model::PolicyEncoders<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
