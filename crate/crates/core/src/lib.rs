//! Whole-slide-image MIL aggregation: Hilbert-curve tile serialization, a
//! hybrid gated-CNN / bidirectional-SSM aggregator, and an asymmetric
//! execution engine that trains in parallel over chunks and streams at
//! inference with bounded peak memory.

pub mod ablation;
pub mod blocks;
pub mod data;
pub mod engine;
pub mod error;
pub mod export;
pub mod hilbert;
pub mod ledger;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
