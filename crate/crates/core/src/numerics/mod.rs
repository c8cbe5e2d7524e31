//! Dense linear algebra, elementwise nonlinearities and seedable sampling.

mod gemm;
mod rng;
mod tensor;

pub(crate) use gemm::{gemm_nn, gemm_tn};
pub use rng::{bernoulli_mask, gaussian, RngState, SeededRng};
pub use tensor::{
    hadamard, matmul, sigmoid, sigmoid_scalar, softmax_in_place, softmax_rows, tanh, Tensor2D,
};
