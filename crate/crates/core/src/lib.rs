//! Deterministic simulator for distillation-based federated learning.
//!
//! Clients and a server exchange soft-labels on a shared unlabeled public
//! pool instead of model parameters. On top of the classic round loop the
//! crate implements a synchronized soft-label cache with a time-to-live,
//! catch-up packages for clients that skip rounds, power-normalization
//! sharpening of the aggregated labels, and byte-exact communication
//! accounting.
//!
//! Module map:
//!
//! * [`soft_label`]: probability vectors, entropy, client averaging.
//! * [`aggregation`]: temperature softmax and power-normalization sharpening.
//! * [`cache`]: global/local caches, cache signals, catch-up packages.
//! * [`hitsim`]: training-free cache hit-ratio simulation.
//! * [`data`]: synthetic task, Dirichlet partitioning, validation splits.
//! * [`learner`]: softmax-linear model with SGD training and distillation.
//! * [`ledger`]: per-round uplink/downlink byte accounting.
//! * [`orchestrator`]: the round loop and its baselines.

pub mod aggregation;
pub mod cache;
pub mod data;
pub mod error;
pub mod hitsim;
pub mod learner;
pub mod ledger;
pub mod orchestrator;
pub mod rng;
pub mod soft_label;

pub use error::{Error, Result};
