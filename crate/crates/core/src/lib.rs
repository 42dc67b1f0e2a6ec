//! Pixel-difference convolution operators (PDC, CLK, CPDC), cross-modal
//! fusion, reverse-mode gradients and a toy two-branch RGB-D segmentation
//! network, all generic over `f32` / `f64`.

pub mod autograd;
pub mod clk;
pub mod error;
pub mod fusion;
pub mod io;
pub mod network;
pub mod params;
pub mod pdc;
pub mod scalar;
pub mod suite;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{ConvSpec, ConvWeights, Padding, Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
