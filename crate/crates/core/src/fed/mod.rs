//! Training loops.
//!
//! - [`rounds`]: FedAvg and the filtered superquantile round (server-side or
//!   client-side filtering), plus the multi-round driver.
//! - [`am`]: the full-participation alternating-minimization solver on the
//!   smoothed objective, with convergence monitoring.

pub mod am;
pub mod config;
pub mod rounds;

pub use am::{
    am_meta, smoothed_full_gradient, AmIterate, AmTrace, InexactnessSchedule, WStepSolver,
};
pub use config::{
    lr_schedule, EtaProtocol, FederationConfig, FilterSite, LearningRate, LocalSolver,
};
pub use rounds::{
    deltafl_round, fedavg_round, local_update, run_federated, Algorithm, EvalSnapshot, RoundLog,
    RunOutput,
};
