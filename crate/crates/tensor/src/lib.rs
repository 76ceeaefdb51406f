//! Minimal dense-tensor engine: reverse-mode autodiff over single-sample
//! `[C, H, W]` feature maps and token matrices, an Adam optimizer, and the
//! `.mgt` tensor file format.

mod error;
pub mod gradcheck;
mod graph;
pub mod io;
mod kernels;
mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use ops::{OpAttrs, OpKind};
pub use optim::AdamState;
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
