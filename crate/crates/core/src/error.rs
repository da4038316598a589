//! Error taxonomy for planning and simulation.
//!
//! Errors are grouped the way the CLI maps them to exit codes: input /
//! schema defects (exit 1), planning infeasibilities (exit 2). Simulated
//! out-of-memory is *not* an error — it is reported as a plan defect in
//! [`crate::schedule_sim::SimMetrics`] and mapped to exit 3 by the CLI.

use thiserror::Error;

/// Unified error type for model parsing, planning and simulation.
#[derive(Debug, Error)]
pub enum PlanError {
    /// Malformed document or a field violating its declared constraints.
    #[error("schema violation: {0}")]
    Schema(String),

    /// An op references a tensor id that no op produces and that is not a
    /// graph input.
    #[error("op `{op}` references dangling tensor `{tensor}`")]
    DanglingTensor { op: String, tensor: String },

    /// The dataflow relation over ops is cyclic.
    #[error("dataflow cycle involving op `{op}`")]
    CycleDetected { op: String },

    /// A scope id occupies two separated runs of the op sequence.
    #[error("scope `{scope}` is interleaved at op `{op}`; scopes must be contiguous runs")]
    InterleavedScopes { scope: String, op: String },

    /// An op kind without a flop formula and without an explicit `flop`.
    #[error("operator `{op}` (kind `{kind}`) has no cost formula and no explicit flop")]
    UnprofiledOperator { op: String, kind: String },

    /// Fewer cluster devices than one replica of the plan requires.
    #[error("insufficient devices: plan requires {required} per replica, cluster has {available}")]
    InsufficientDevices { required: usize, available: usize },

    /// No feasible assignment exists (memory-bound balancing or partitioning).
    #[error("planning infeasible: {0}")]
    Infeasible(String),

    /// A sharding unit matched no pattern in the table.
    #[error("no sharding pattern matches op `{op}` (kind `{kind}`)")]
    UnsupportedSplit { op: String, kind: String },

    /// A tensor dimension is smaller than the requested shard count.
    #[error("cannot split op `{op}`: dimension of size {dim_size} into {shards} shards")]
    UnsplittableDimension {
        op: String,
        dim_size: u64,
        shards: usize,
    },

    /// A GatherBatch bridge requires a batch dimension the tensor lacks.
    #[error("bridge requires a batch dimension but tensor `{tensor}` declares none")]
    MissingBatchDim { tensor: String },

    /// Fewer samples than devices that must each receive at least one.
    #[error("batch of {batch} cannot cover {devices} devices with at least one sample each")]
    UnderfullBatch { batch: u64, devices: usize },
}

impl PlanError {
    /// True for defects in the input documents themselves (CLI exit 1);
    /// false for planning-stage infeasibilities (CLI exit 2).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PlanError::Schema(_)
                | PlanError::DanglingTensor { .. }
                | PlanError::CycleDetected { .. }
                | PlanError::InterleavedScopes { .. }
                | PlanError::UnprofiledOperator { .. }
                | PlanError::UnderfullBatch { .. }
        )
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, PlanError>;
