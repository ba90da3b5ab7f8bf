//! Float64 tensors, a reverse-mode autodiff tape, and the handful of ops a
//! snippet-based video transformer needs: matmul, softmax, layer norm,
//! channels-last 3D convolution, multi-head attention, and bicubic resizing.
//!
//! ```
//! use vit_tad_tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
//! let y = x.mul(x).unwrap().sum().unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

pub mod counter;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod param;
mod tensor;

pub use counter::{count_macs, MacCounts};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{attention_probs, bicubic_resize_2d, same_padding, CustomOp, Gradients, Graph, Var};
pub use kernels::{sigmoid, softplus, ConvGeom};
pub use param::{BoundParams, InitScheme, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
