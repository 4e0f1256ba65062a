//! Mixture density networks trained with natural-gradient expectation
//! maximization.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffnet`]: a dense GELU network with explicit forward/backward passes
//!   producing the raw mixture-head outputs.
//! - [`mixture`]: the Gaussian-mixture head, E-step responsibilities, the
//!   NLL / sGEM / nGEM objectives and the Fisher preconditioners that act on
//!   distribution-parameter gradients.
//! - [`optim`]: SGD and Adam updaters over flat parameter vectors.
//! - [`data`]: Two-Gaussians and Two-Sinusoids generators, CSV ingestion and
//!   seeded batching.
//! - [`harness`]: run configuration, the training loop, metrics and CSV output.
//! - [`oracle`]: brute-force verifiers (finite differences, Monte-Carlo Fisher
//!   estimates, explicit pseudo-inverses) used by the tests and `ngem verify`.

pub mod checkpoint;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod mixture;
pub mod optim;
pub mod oracle;

pub use error::{Error, Result};
