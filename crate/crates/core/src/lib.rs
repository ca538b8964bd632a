//! Jagged-tensor training primitives for generative recommendation.
//!
//! The crate is organized around the pieces of a sparse/dense recommendation
//! training step:
//!
//! - [`jagged`]: variable-length batches and padding-free attention with
//!   relative attention bias.
//! - [`embedding`]: multi-table embedding storage, jagged lookup, core-grouped
//!   lookup, sparse backward and an FP16 lookup path.
//! - [`balance`]: token-aware batch scaling and global token reallocation.
//! - [`hsp`]: hierarchical sparse parallelism over a simulated cluster.
//! - [`semi_async`]: sparse-ahead scheduling, staleness bookkeeping and the
//!   delayed-SGD convergence bound.
//! - [`pipeline`]: a discrete-event simulator of the six-stage training
//!   pipeline.
//! - [`negsample`]: jagged negative sampling, offloaded segmented logits,
//!   logit sharing and the sampled-softmax loss.
//! - [`data`]: interaction-log preprocessing and HR@K / NDCG@K.
//! - [`toy`]: a small embedding-bag recall model used to probe convergence.
//! - [`bench`]: configuration, workload generation and experiment reports.

pub mod balance;
pub mod bench;
pub mod data;
pub mod embedding;
pub mod error;
pub mod hsp;
pub mod jagged;
pub mod negsample;
pub mod pipeline;
pub mod rng;
pub mod semi_async;
pub mod toy;

pub use error::{Error, Result};
pub use jagged::{JaggedTensor, Scalar};
