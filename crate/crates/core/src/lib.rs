pub mod datasets;
pub mod error;
pub mod mixture;
pub mod peps;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{PepsError, Result};
pub use peps::{ContractionSettings, GridConfig, Peps};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Peps64 = Peps<f64>;
pub type Peps32 = Peps<f32>;
