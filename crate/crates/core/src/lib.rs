pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod loss;
pub mod network;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore32 = network::ParamStore<f32>;
pub type Checkpoint32 = network::ModelCheckpoint<f32>;
