//! Reverse-mode differentiation over rank-2 `f64` tensors.

mod gradcheck;
mod graph;
mod lstm;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradReport};
pub use graph::{Graph, Var};
pub use lstm::{lstm_step, lstm_unroll, LstmParams};
pub use params::{Init, Param, ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;

pub(crate) use graph::{leaky_relu, sigmoid};
