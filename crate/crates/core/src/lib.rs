//! Multi-interest candidate retrieval over temporal user-item engagement
//! graphs.
//!
//! The pipeline: co-embed users and items on the train period
//! ([`embed`]), cluster items into interests ([`kmeans`]), turn the train
//! engagements into sparse per-user interest priors ([`init`]), then for each
//! later time chunk infer every engagement's interest with a collapsed Gibbs
//! sampler ([`sampler`]) and rank the chunk's items per user as a mixture
//! over the user's interests ([`retrieval`]). [`ann`] and the popularity
//! ranker are the baselines, [`eval`] scores candidates against the next
//! chunk, and [`synth`] samples graphs with planted parameters.

pub mod ann;
pub mod counts;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graph;
pub mod init;
pub mod io;
pub mod kmeans;
pub mod retrieval;
pub mod sampler;
pub mod synth;

pub use error::{Error, Result};
