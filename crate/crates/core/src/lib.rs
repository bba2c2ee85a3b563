// SPDX-License-Identifier: MIT OR Apache-2.0

//! Context-dependent detoxification with hierarchical prefixes.
//!
//! A frozen tiny decoder-only transformer is steered through per-layer
//! key/value prefixes. Meta prefixes read the user utterance and generate a
//! stance-control prefix, which is added element-wise to a toxicity-control
//! prefix before the response is generated.

pub mod app;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod optim;
pub mod prefix;
pub mod tensor;
pub mod tinylm;
pub mod training;

pub use error::{Error, Result};
