//! Pipeline driver for multi-interest candidate retrieval backtests: data
//! ingestion, embedding, interest clustering, initialization, rolling
//! per-chunk inference with retrieval evaluation, synthetic data and reports.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{Method, RunConfig};
pub use pipeline::{BacktestOptions, Layout};
