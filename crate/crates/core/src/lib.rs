//! Identification toolkit for state-conditioned second-order surrogate models.
//!
//! The crate learns models of the form
//!
//! ```text
//!     d/dt [y, v] = [v, -k(x)·y - d(x)·v + g(x)·u],    x = (y, v)
//! ```
//!
//! from sparse, noisy trajectory data. Two networks are trained in an
//! alternating curriculum: a solution network reconstructs trajectories as
//! smooth functions of time (conditioned on the input signal), and a
//! coefficient network maps instantaneous states to the local stiffness,
//! damping, and input gain. Short-window ridge regressions over the
//! reconstructed states supply supervision hints for the coefficient network.
//!
//! Everything is built on a scalar expression tape ([`autodiff`]) so that the
//! time derivatives needed by the physics residual, and the weight gradients
//! needed by the optimizer, come from the same graph.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod nn;
pub mod ridge;
pub mod surrogate;
pub mod systems;
pub mod train;

pub use autodiff::{AdError, Dual, ExprId, GradientMap, Tape};
pub use surrogate::{CanonicalParams, Coefficients, Normalization, State};
