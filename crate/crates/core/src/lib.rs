//! Weakly supervised temporal action labeling with a similarity-reweighted
//! CTC loss.
//!
//! The crate is organised around the [`lattice`] module, which computes the
//! exact likelihood of an action ordering under a per-frame softmax whose
//! transitions are renormalized by frame similarity, plus the soft targets
//! and gradient used to train a recurrent network. [`oracle`] holds
//! brute-force references for all of it.

pub mod check;
pub mod data_io;
pub mod error;
pub mod lattice;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod similarity;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
