//! Dense tensors, a reverse-mode gradient tape and an Adam optimizer.
//!
//! ```
//! use std::sync::Arc;
//! use genconvit_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Arc::new(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap()));
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod adam;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod ops;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use float::{DType, Float};
pub use graph::{Gradients, Graph, Var};
pub use ops::elementwise::Activation;
pub use ops::norm::{NormMode, RunningStats};
pub use ops::shape::GATHER_ZERO;
pub use tensor::Tensor;
