//! Explainable multi-hop reasoning over n-tuple temporal knowledge graphs.
//!
//! A reinforcement-learning agent walks historical n-ary facts from the
//! query entity and lands on the predicted answer; the walk itself is the
//! explanation. Actions are scored by a gated mixture of three policies
//! (predicate-only, core-element, whole-fact) over entity embeddings
//! produced by an auxiliary-element-aware graph convolution.

pub mod error;
pub mod config;
pub mod data;
pub mod env;
pub mod gcn;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod params;
pub mod policy;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
