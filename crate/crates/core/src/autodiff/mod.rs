//! Scalar reverse-mode automatic differentiation on a flat expression tape.
//!
//! The engine records every scalar operation as a node in a [`Tape`]. Nodes
//! are appended eagerly (values are computed as the graph is built), a
//! reverse sweep accumulates adjoints, and parameter leaves collect their
//! partials into a [`GradientMap`]. Time derivatives of network outputs are
//! obtained by building the graph in dual-number arithmetic ([`Dual`]): the
//! tangent half of each dual is itself made of tape nodes, so a reverse sweep
//! differentiates straight through the tangent computation (reverse over
//! forward, one level of nesting).
//!
//! The design favors throughput over generality: nodes are 12 bytes, values
//! live in a parallel array, and inner products are fused into
//! multiply-accumulate chains. There is no graph optimization beyond
//! shortcuts for the interned constants zero and one.

mod dual;
mod tape;

pub use dual::{time_derivative, Dual};
pub use tape::{ExprId, GradientMap, Op, Tape};

use std::fmt;

/// Errors surfaced by graph evaluation and differentiation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdError {
    /// `evaluate` was called without a binding for a named input.
    UnboundInput(String),
    /// A node produced a NaN or infinite value during a forward sweep.
    NonFinite { node: u32, op: &'static str },
    /// A node id does not refer to a node on this tape.
    UnknownNode(u32),
    /// The tangent of a time derivative came out NaN or infinite.
    NonFiniteTangent { node: u32 },
}

impl fmt::Display for AdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdError::UnboundInput(name) => write!(f, "input '{name}' has no binding"),
            AdError::NonFinite { node, op } => {
                write!(f, "node {node} ({op}) evaluated to a non-finite value")
            }
            AdError::UnknownNode(id) => write!(f, "node id {id} is not on this tape"),
            AdError::NonFiniteTangent { node } => {
                write!(f, "time derivative at node {node} is non-finite")
            }
        }
    }
}

impl std::error::Error for AdError {}
