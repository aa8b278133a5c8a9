//! Sock ownership as sequential pairing under wear-out and laundry loss.
//!
//! The crate covers the simulator (catalogue, environment dynamics, pairing
//! policies, outcome metrics), the experiment drivers built on it, maximum
//! likelihood estimators for mismatch sensitivity and diversity preference,
//! and exhaustive solvers for tiny planning instances.

pub mod catalogue;
pub mod config;
pub mod environment;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod metrics;
pub mod oracle;
pub mod policies;
pub mod rng;

pub use catalogue::{Assortment, Catalogue, CatalogueSpec, FeatureSpace, PairMetric, SockDesign};
pub use environment::{AgentParams, SimConfig, SockInstance};
pub use error::{Error, Result};
pub use metrics::RunMetrics;
pub use policies::{Policy, PolicyKind};
