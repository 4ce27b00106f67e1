//! Edge-gated 3-d segmentation networks on a small reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`kernels`]: dense `f64` tensors and the
//!   differentiable ops (conv3d, trilinear upsampling, group norm, softmax, ...).
//! - [`nn`]: residual blocks, the edge-gated layer, the encoder-decoder
//!   backbone and the assembled [`nn::EgModel`].
//! - [`edge`]: 3-d Sobel responses, edge ground truth and the straight-through
//!   boundary field.
//! - [`losses`]: Dice, balanced cross entropy, edge and consistency losses.
//! - [`data`]: synthetic phantoms, normalization, splits and the EGV1 format.
//! - [`train`]: Adam, the learning-rate schedule, metrics, checkpoints and
//!   the training / evaluation / ablation drivers.
//! - [`gradcheck`]: finite-difference suites for every differentiable op.

pub mod data;
pub mod edge;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod labels;
pub mod losses;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use labels::LabelVolume;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
