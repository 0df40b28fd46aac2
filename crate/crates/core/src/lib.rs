//! Coordinated two-component instruction tuning at desk scale.
//!
//! The crate trains a toy multimodal model (feature encoder + frozen causal
//! backbone + low-rank adapters), measures how evenly the two trainable
//! components move the model's output distribution, and steers their
//! learning rates and gradients accordingly. See the README for the CLI.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod schedulers;
pub mod tasks;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use graph::{finite_diff_grad, Graph, Var};
pub use model::{Component, Example, GenerationDistribution, Model, ModelShape, ParamSet};
pub use tensor::Tensor;
