//! Core algorithms for asynchronous stochastic L-BFGS sampling.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It provides
//!
//! * [`model`]: potentials with exact and subsampled gradients, including a
//!   linear Gaussian model and a Gaussian matrix-factorization model,
//! * [`lbfgs`]: a bounded curvature memory with cautious admission and the
//!   two-loop recursion,
//! * [`sampler`]: worker/master update rules for as-L-BFGS and the SGLD,
//!   a-SGD and synchronous multi-batch L-BFGS baselines,
//! * [`simulator`]: a deterministic discrete-event simulator of
//!   (a)synchronous master/worker optimization.
//!
//! Companion IO, threading and the command-line driver live in the `asqn`
//! crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod lbfgs;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod simulator;

pub use error::{Error, Result};
