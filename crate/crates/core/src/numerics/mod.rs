//! Real-valued tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] is a tape of [`TensorNode`]s; forward ops append nodes, and
//! [`Graph::backward`] walks the tape in reverse to accumulate gradients.
//! The op set is exactly what the HA02 forward pass and its training loop
//! need; this is not a general autodiff library.
//!
//! Training and inference run at `f32`, gradient checks at `f64` (the
//! [`Real`] scalar trait covers both).

mod check;
mod graph;
mod scalar;


pub use check::{finite_diff_check, FdMode, FdReport};
pub use graph::{Activation, Graph, NodeId, TensorError};
pub use scalar::Real;
