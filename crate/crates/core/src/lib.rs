//! Robustness training methods and probabilistic-robustness evaluation.

pub mod attacks;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
mod kernels;
pub mod leaderboard;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod perturbation;
pub mod report;
pub mod risk;
pub mod rng;
pub mod tensor;
pub mod trainers;

pub use autodiff::{Primitive, Tape, Var};
pub use config::ExperimentConfig;
pub use error::{Error, FieldError, Result};
pub use model::{Model, ModelParams, ModelSpec};
pub use report::{EvalConfig, EvalReport};
pub use rng::RngStream;
pub use tensor::Tensor;
