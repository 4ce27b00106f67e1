//! Raw numeric kernels behind the differentiable ops in [`crate::tape`].

pub mod conv;
pub mod gemm;
pub mod norm;
pub mod upsample;
