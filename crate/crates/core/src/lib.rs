pub mod augment;
pub mod autodiff;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod nart;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tensor;
pub mod training;
pub mod verify;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorMap};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type GraphF32 = autodiff::Graph<f32>;
pub type GraphF64 = autodiff::Graph<f64>;
pub type ModelParamsF32 = encoders::ModelParams<f32>;
pub type ModelParamsF64 = encoders::ModelParams<f64>;
pub type CheckpointF32 = training::Checkpoint<f32>;
pub type CheckpointF64 = training::Checkpoint<f64>;
pub type TrainerF32<'a> = training::Trainer<'a, f32>;
pub type TrainerF64<'a> = training::Trainer<'a, f64>;
