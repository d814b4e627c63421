//! Personalized federated learning over subgraphs of a latent global graph.
//!
//! Clients hold disjoint or overlapping subgraphs and train a two-layer GCN
//! with a linear classifier. The server estimates which clients belong to
//! the same graph community by feeding every client model a shared random
//! probe graph and comparing the mean output embeddings, then sends each
//! client a softmax-weighted average of the peers' parameters. Clients learn
//! a private sparse multiplicative mask over what they receive.

// `!(x >= 0.0)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod fl;
pub mod graph;
pub mod nn;
pub mod partition;
pub mod report;

pub use error::{Error, Result};
