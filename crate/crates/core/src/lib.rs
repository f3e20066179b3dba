//! Engine for neuron-level editing of factual associations in a small
//! decoder-only transformer.
//!
//! The pipeline: train a model on a synthetic closed-vocabulary fact
//! corpus, score FFN neurons for their influence on a prediction, build
//! sparse masks from those scores, and rewrite the selected `w_out`
//! columns in closed form so one fact changes while the rest of the
//! model's behavior is protected.

pub mod attribution;
pub mod corpus;
pub mod diagnostics;
pub mod editor;
pub mod error;
pub mod harness;
pub mod masking;
pub mod math;
pub mod model;

pub use error::{Error, Result};
