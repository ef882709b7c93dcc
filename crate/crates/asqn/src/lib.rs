//! Shared-memory runtime, experiment driver and file formats for
//! asynchronous stochastic quasi-Newton sampling. The numerical core lives
//! in `asqn-core`.

pub mod config;
pub mod experiment;
pub mod movielens;
pub mod runtime;
pub mod synth;
pub mod trace;

pub use asqn_core as core;
