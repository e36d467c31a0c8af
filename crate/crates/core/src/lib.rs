//! Federated learning with superquantile (tail-risk) objectives.
//!
//! The crate is organised bottom-up:
//!
//! - [`superquantile`]: weighted quantiles, superquantiles, the smoothed dual
//!   objective and its closed-form minimizers in the auxiliary variable.
//! - [`models`]: per-example losses and gradients for linear models, plus the
//!   [`models::DeviceObjective`] abstraction used by the optimizers.
//! - [`data`]: device shards, populations, synthetic generators and the
//!   JSON-lines device file format.
//! - [`secure_agg`]: simulated secure aggregation and the majorization-
//!   minimization quantile protocol built on top of it.
//! - [`fed`]: FedAvg, the filtered superquantile training loop and the
//!   alternating-minimization solver.
//! - [`metrics`]: distributional summaries over devices.

pub mod data;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod secure_agg;
pub mod superquantile;

pub use error::{Error, Result};
