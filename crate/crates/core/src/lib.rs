//! Geo-visual hard-batch mining and place-recognition evaluation.
//!
//! The crate works entirely on embedding files: patch descriptors are
//! modulated and aggregated into global descriptors, per-epoch geo-visual
//! affinity graphs are rebuilt from those descriptors, hard training batches
//! are drawn from the graphs by greedy weighted clique expansion, and
//! retrieval quality is scored under the usual place-recognition protocols.

pub mod clique;
pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod geo;
pub mod graph;
pub mod interact;
pub mod manifest;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
