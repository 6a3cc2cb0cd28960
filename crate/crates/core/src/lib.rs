//! Prompt-routed dynamic depth pruning for decoder-only transformers.
//!
//! A router reads the prompt and picks one omission set (blocks to skip)
//! from a pool found offline by greedy search; the pipeline then pages in
//! only the surviving blocks and decodes with the pruned model.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod router;
pub mod search;
pub mod synthetic;

pub use error::{Error, Result};
