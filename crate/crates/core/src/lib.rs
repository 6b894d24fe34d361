//! Deterministic federated-learning simulator built around K-seed random
//! subspace optimization.
//!
//! Clients train inside low-dimensional random subspaces regenerated from
//! broadcast seeds, accumulate their model updates per seed, and upload only
//! the accumulators; the server aggregates seed by seed and every party
//! reconstructs the global model from seeds plus accumulators, so full
//! weight matrices never travel. Full fine-tuning and additive low-rank
//! adapter baselines, IID and Dirichlet non-IID partitioning, and an
//! analytic communication/memory cost model round out the toolkit.
//!
//! All floating-point state is f64. Every random draw flows from one master
//! seed through named sub-streams ([`rng`]), making runs bit-reproducible.

pub mod accounting;
pub mod config;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod local_trainer;
pub mod memtrace;
pub mod partitioner;
pub mod report;
pub mod rng;
pub mod sketch;
pub mod tasks;

pub use error::{Error, Result};
