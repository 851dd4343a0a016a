//! Reverse-mode differentiation: the [`Graph`] tape and a finite-difference
//! checker for it.

mod gradcheck;
mod graph;

pub use gradcheck::{gradcheck, gradcheck_many, GradCheck};
#[cfg(test)]
pub(crate) use graph::fault;
pub use graph::{Binary, Graph, Unary, Var, SIGNED_SQRT_FLOOR, SQRT_GUARD};
