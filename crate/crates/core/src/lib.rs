//! Federated learning across clients with heterogeneous private models.
//!
//! Each client keeps a private classifier of its own architecture and a small
//! proxy whose architecture is shared by everyone. During local training the
//! private model distills into the proxy, and the proxy feeds back only its
//! confident behavior: conformal prediction sets, weighted by how much they
//! agree with the private model's own sets. Only proxies are sent to the
//! server and averaged.
//!
//! Module map:
//! - [`nn`]: dense ReLU networks, backpropagation, Adam, parameter blobs
//! - [`losses`]: cross-entropy, distillation terms, proximal term
//! - [`conformal`]: temperature scaling, RAPS-style scores, thresholds, sets
//! - [`reciprocity`]: consensus weight and the local training loop
//! - [`federation`]: client sampling, aggregation, rounds, evaluation
//! - [`data`]: synthetic data, IDX loading, Dirichlet partitioning
//! - [`config`] and [`runner`]: run configuration and experiment execution

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod conformal;
pub mod data;
pub mod error;
pub mod federation;
pub mod losses;
pub mod nn;
pub mod reciprocity;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
