//! Deterministic federated-learning simulator for clients with heterogeneous
//! NLP objectives.
//!
//! The crate provides the numeric kernels, a tiny from-scratch
//! encoder-decoder backbone with hand-derived gradients, synthetic
//! multi-domain corpora, the local training objectives, the two-stage
//! federation protocol with clustered and neighbor-based aggregation, and
//! the evaluation metrics. Everything is double precision and seeded through
//! named counter-based RNG streams, so a `(config, seed)` pair reproduces a
//! run byte for byte.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
