//! Heterogeneous job-displacement effects with clustered honest causal forests.
//!
//! The crate covers the full estimation pipeline: a synthetic data generator
//! with a known effect function, panel ingestion and propensity-score
//! matching, cluster-aware regression and causal forests, cross-fitted CATEs,
//! evaluation (group ATEs, AIPW, calibration, RATE/Qini), policy-tree
//! targeting and partial market-effect decompositions.

pub mod crossfit;
pub mod dataset;
pub mod dgp;
pub mod error;
pub mod evaluate;
pub mod forest;
pub mod ingest;
pub mod matching;
pub mod partials;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod rng;
pub mod stats;

pub use dataset::Dataset;
pub use error::{Error, Result};
