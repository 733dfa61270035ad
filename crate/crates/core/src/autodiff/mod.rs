//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (shapes are inferred while building), then run
//! any number of times with [`evaluate`] against named tensor bindings.
//! [`backward`] turns one evaluation into gradients for every named leaf.

mod eval;
mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use eval::{backward, evaluate, BnUpdate, Evaluation, Gradients, Mode};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Node, NodeId, Op};

#[cfg(test)]
mod tests;
