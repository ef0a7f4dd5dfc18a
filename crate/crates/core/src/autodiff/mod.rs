//! Minimal reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward computation together with
//! its output value. [`Tape::backward`] then sweeps the recorded nodes once in
//! reverse order. Nodes are appended in evaluation order, so the tape is always
//! a DAG in topological order.
//!
//! The op vocabulary is deliberately closed: it is exactly what the
//! reconstruction methods, the lesion classifier and the attacks need.

pub(crate) mod ops;
mod tape;
mod tensor;

pub use ops::Op;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

pub(crate) use ops::{correlate1d, field_normalize, grad2d, grad2d_adjoint};

#[cfg(test)]
mod tests;
