//! Ensembles of independently fitted variational approximations and the
//! multiple-importance-sampling evidence lower bound (MISELBO).
//!
//! The crate is organized bottom-up:
//!
//! * [`rng`]: label-keyed random streams,
//! * [`targets`]: unnormalized log-densities,
//! * [`approximations`]: Gaussian and hierarchical members and the ensemble,
//! * [`estimators`]: ELBO, IWELBO, MISELBO, JSD, KL variants on shared sample batches,
//! * [`training`]: Adam-based ELBO ascent for each member,
//! * [`experiments`]: sweep runners, the identity/bound verifier, CSV and SVG output.

pub mod approximations;
pub mod config;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod math;
pub mod rng;
pub mod targets;
pub mod training;

pub use approximations::{Approx, Ensemble, GaussianApprox, HierarchicalApprox, Member, Trainable};
pub use error::{Error, Result};
pub use estimators::{draw_batch, BoundEstimate, Estimator, SampleBatch};
pub use rng::{derive_stream, RandomStream, SeedSpec};
pub use targets::{make_setting, SettingId, Target};
