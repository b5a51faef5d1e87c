//! Neural-network fitted value iteration for finite-horizon MDPs whose
//! transitions are affine in a bounded integer action vector.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: the MDP abstraction (`f(x, a, ξ) = A(x, ξ) + B(x, ξ)·a`), the
//!   integer action box and state sampling.
//! - [`neural`]: two-layer ReLU value approximators and their regularised
//!   least-squares training.
//! - [`simplex`] and [`bnb`]: a dense primal simplex and a best-first
//!   branch-and-bound over binaries. Small and dependency free.
//! - [`cuts`]: recourse evaluation over a ReLU network and the cut families
//!   (gradient, positive-neuron, combined, integer optimality).
//! - [`mcd`]: action selection engines (multi-cut decomposition, brute
//!   force, integer L-shaped).
//! - [`fvi`]: the backward fitted-value-iteration driver and an exact
//!   tabular dynamic-programming oracle.
//! - [`mcip`]: the multi-facility capacity investment benchmark.
//! - [`experiments`]: config-driven batch runs behind the `nnfvi` binary.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example <name>`.

pub mod bnb;
pub mod cuts;
pub mod error;
pub mod experiments;
pub mod fvi;
pub mod mcd;
pub mod mcip;
pub mod mdp;
pub mod neural;
pub mod rng;
pub mod simplex;

pub use error::{Error, Result};
