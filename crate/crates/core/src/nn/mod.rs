//! Dense numerics with reverse-mode differentiation.

pub mod gradcheck;
pub mod graph;
pub mod lstm;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradCheckSettings};
pub use graph::{Graph, NodeId};
pub use lstm::{bilstm_forward, lstm_cell, CellWeights, LstmStack};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{linear, sigmoid, tanh, Tensor};
