//! Adversarially fine-tuned language-model synthesis of tabular data.
//!
//! Rows are serialized to sentences, a small autoregressive policy is fitted
//! on them, then refined with PPO against a learned discriminator. Evaluation
//! and a retrieval-augmented explanation audit operate on the result.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod audit;
pub mod checkpoint;
pub mod codec;
pub mod discriminator;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod toy;

pub use error::{Error, Result};
