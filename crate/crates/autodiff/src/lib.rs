//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records each operation as it is evaluated; [`Graph::backward`]
//! then walks the tape once in reverse. The op set is deliberately small:
//! exactly what a windowed-attention U-Net with convolutional gating needs.
//!
//! ```
//! use hsi_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![2], vec![1.0, -3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -6.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, LinearOperator, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
