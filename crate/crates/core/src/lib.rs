//! Evolving the weights of a multi-task, multi-modal self-supervised loss
//! with an unsupervised cluster-distribution fitness.

pub mod error;
pub mod evolve;
pub mod exec;
pub mod fitness;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod synthgen;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use exec::Exec;
