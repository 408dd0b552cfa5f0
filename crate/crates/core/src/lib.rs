pub mod autograd;
pub mod checkpoint;
pub mod compute;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod pruning;
pub mod scalar;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{count_parameters, MaskSet, ModelConfig, ModelParameters, Transformer};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Transformer32 = Transformer<f32>;
pub type Transformer64 = Transformer<f64>;
pub type MaskSet32 = MaskSet<f32>;
pub type MaskSet64 = MaskSet<f64>;
pub type ModelParameters32 = ModelParameters<f32>;
pub type ModelParameters64 = ModelParameters<f64>;
