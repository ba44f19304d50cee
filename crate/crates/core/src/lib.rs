//! Prototype-based self-explainable graph neural networks.
//!
//! The crate trains a GCN encoder, a prototype generator and a set of learnable
//! prototype embeddings jointly, then classifies graphs (or nodes, through their
//! local graphs) by similarity to the generated prototype graphs. Each
//! prediction comes with the prototypes that produced it.

pub mod classifier;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prototypes;
pub mod synth;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
