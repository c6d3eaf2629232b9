//! Cascaded projection compression for small convolutional networks.
//!
//! Each compressible convolution gets an orthonormal channel projection
//! `P = Φ(X)`, the polar factor of an unconstrained proxy matrix `X` that is
//! trained by ordinary SGD through a differentiable SVD. Once trained, `P` is
//! folded into the layer's output channels and `Pᵀ` into the next layer's
//! input channels, so the compressed network carries no extra layers.

pub mod autodiff;
pub mod checkpoint;
pub mod compress;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod proxy;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Gradients, Var};
pub use error::{Error, Result};
pub use linalg::{Mat, SvdFactors};
pub use tensor::Tensor;
