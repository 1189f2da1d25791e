//! Desk-scale simulator for personalized decentralized learning over a
//! communication graph.
//!
//! `N` workers each hold a private data shard, a private prediction head,
//! and a local estimate of one shared low-dimensional representation. Every
//! communication round a worker takes `τ` local SGD steps on its head, one
//! step on its representation estimate, and then replaces that estimate with
//! a doubly-stochastic weighted average of its neighbors' estimates. Heads
//! are never exchanged, which is what personalizes the result.
//!
//! The crate is generic over the scalar type via [`Scalar`] (`f32` or
//! `f64`); the `*64` aliases below fix the default precision used by the
//! binaries and the test suites.
//!
//! Modules, bottom-up:
//!
//! - [`topology`]: graphs, Metropolis consensus weights, mixing constants;
//! - [`model`]: representations, heads, losses, analytic gradients;
//! - [`data`]: planted synthetic tasks, Dirichlet partitioning, shard files;
//! - [`engine`]: the round loop, the single-model baseline, schedules,
//!   generalization to unseen workers, checkpoints;
//! - [`metrics`]: the `M(k)` diagnostic, its closed-form bound, constants
//!   estimation, similarity matrices, accuracy;
//! - [`gradcheck`]: finite-difference verification of the gradients.

pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Version tag stamped into every CSV and JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Default simulation precision.
pub type Real = f64;

pub type Representation64 = model::Representation<Real>;
pub type Head64 = model::Head<Real>;
pub type ExampleSet64 = model::ExampleSet<Real>;
pub type Shard64 = data::Shard<Real>;
pub type PlantedTask64 = data::PlantedTask<Real>;
pub type ConsensusMatrix64 = topology::ConsensusMatrix<Real>;
pub type MixingParams64 = topology::MixingParams<Real>;
pub type WorkerState64 = engine::WorkerState<Real>;
pub type Checkpoint64 = engine::Checkpoint<Real>;
