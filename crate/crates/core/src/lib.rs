//! Parallelization planning and performance simulation for distributed
//! deep-learning training.
//!
//! The crate turns an annotated computation graph plus a cluster
//! description into an execution plan — TaskGraphs bound to virtual
//! devices, sharding rewrites, bridge layers, and load-balanced batch
//! splits — and predicts the plan's step time with a deterministic
//! discrete-event simulator.

pub mod balance;
pub mod bridge;
pub mod cluster;
pub mod error;
pub mod model_ir;
pub mod plan;
pub mod report;
pub mod schedule_sim;
pub mod sharding;
pub mod trace;
pub mod taskgraph;

pub use error::{PlanError, Result};
