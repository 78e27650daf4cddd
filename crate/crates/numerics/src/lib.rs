//! Numerical substrate: dense tensors, a reverse-mode tape with the layer
//! primitives the grounding model needs, the Adam optimizer and a
//! finite-difference checker.

mod cell;
mod conv;
pub mod error;
pub mod gradcheck;
mod graph;
mod gru;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use cell::gru_cell;
pub use conv::window_count;
pub use error::{Error, Result};
pub use graph::{sigmoid, smooth_l1, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter, Session};
pub use scalar::{gemm, MatRef, Scalar};
pub use tensor::Tensor;
