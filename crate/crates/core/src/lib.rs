//! Carbon-aware client selection for simulated federated learning.
//!
//! The crate covers the whole pipeline: a small MLP with hand-written
//! backprop and Adam, synthetic client data with Dirichlet label skew and
//! feature corruption, hourly carbon-intensity traces, utility-based and
//! budget-constrained client selection, the round loop, and the report files.

mod error;
mod rng;

pub mod carbon;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod report;
pub mod selection;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
pub use rng::{derive_seed, rng_for, tag};

pub use carbon::{CarbonTrace, RegionAssignment};
pub use config::ExperimentPlan;
pub use data::{ClientDataset, DatasetSpec, PartitionSpec};
pub use model::{ModelParams, Sample};
pub use sim::{Environment, RunResult, SimConfig, Strategy};
