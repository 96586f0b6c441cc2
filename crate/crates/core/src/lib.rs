//! Inference-time dynamic low-rank adaptation for small causal language models.
//!
//! Inputs are grouped by k-means over their mean token embeddings so every
//! mini-batch is drawn from a single cluster. A hypernetwork maps the batch
//! mean embedding to the low-rank factor of an LM-head update, and the result
//! is compared against static LoRA and the frozen, unadapted backbone.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
