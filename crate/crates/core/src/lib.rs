//! A desk-scale transformer laboratory.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use autodiff::{grad_check, GeluKind, Tape, Var};
pub use config::{DataConfig, ExperimentConfig, ModelConfig, TrainConfig};
pub use error::{LabError, Result};
pub use model::{init_params, TransformerModel};
pub use tensor::Tensor;
