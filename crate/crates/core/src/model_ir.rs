//! Annotated computation-graph IR.
//!
//! A model arrives as a JSON document with top-level keys `tensors`, `ops`,
//! `annotations` and `config`. Ops are listed in definition order, which is
//! required to be a topological order of the dataflow; weights are implicit
//! (declared per op via `param_bytes`, with matmul weight shapes inferred
//! from input/output shapes). Annotations attach a parallelization strategy
//! to a *scope*: a contiguous run of ops sharing a `scope` id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

// ── Types ────────────────────────────────────────────────────────────────

/// Logical tensor: shape, element width and (optionally) which dimension
/// carries the batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub id: String,
    /// Dimension sizes, all ≥ 1. Shapes are given at the reference batch
    /// size (the declared size of `batch_dim`).
    pub shape: Vec<u64>,
    /// Bytes per element, ≥ 1.
    pub elem_bytes: u64,
    /// Index of the batch dimension, if the tensor has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_dim: Option<usize>,
}

impl TensorSpec {
    /// Total bytes at the declared (reference) batch size.
    pub fn bytes(&self) -> u64 {
        self.elem_bytes * self.shape.iter().product::<u64>()
    }

    /// Total element count at the declared batch size.
    pub fn elements(&self) -> u64 {
        self.shape.iter().product()
    }

    /// Total bytes with the batch dimension rescaled to `batch` samples.
    /// Tensors without a batch dimension are batch-invariant.
    pub fn bytes_at_batch(&self, batch: u64) -> u64 {
        match self.batch_dim {
            Some(d) => {
                let mut shape = self.shape.clone();
                shape[d] = batch;
                self.elem_bytes * shape.iter().product::<u64>()
            }
            None => self.bytes(),
        }
    }
}

/// Operator kinds understood by the cost model. `conv`, `embedding` and
/// `generic` carry no built-in flop formula and must declare `flop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Matmul,
    Elementwise,
    Softmax,
    Conv,
    Embedding,
    Generic,
}

impl OpKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Elementwise => "elementwise",
            OpKind::Softmax => "softmax",
            OpKind::Conv => "conv",
            OpKind::Embedding => "embedding",
            OpKind::Generic => "generic",
        }
    }
}

/// One node of the computation graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNode {
    pub id: String,
    pub kind: OpKind,
    /// Ids of consumed tensors. Ids produced by no op are graph inputs.
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Ids of produced tensors (each produced by exactly one op).
    pub outputs: Vec<String>,
    /// Annotation scope this op belongs to; absent means the default scope.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    /// Bytes of trainable parameters owned by this op (weights are not
    /// separate tensors in the graph).
    #[serde(default)]
    pub param_bytes: u64,
    /// Explicit forward flop; overrides the kind's formula when present and
    /// mandatory for kinds without one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flop: Option<u64>,
}

/// Parallelization strategy named by an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// Data parallelism: the scope is replicated onto `device_count`
    /// devices, each processing a share of the batch.
    Replicate,
    /// Tensor parallelism: the scope's ops are sharded across
    /// `device_count` devices via the pattern table.
    Split,
}

/// Strategy attached to one scope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub scope_id: String,
    pub strategy: StrategyKind,
    /// Devices the scope occupies within one plan replica. Replicate
    /// requires ≥ 1, split requires ≥ 2.
    pub device_count: usize,
}

fn default_num_micro_batch() -> u64 {
    1
}
fn default_optimizer_state_multiplier() -> f64 {
    2.0
}
fn default_backward_flop_multiplier() -> f64 {
    2.0
}
fn default_apply_flop_per_param_byte() -> f64 {
    1.0
}

/// Planning knobs shared by the planner and the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    /// Micro-batches per step; > 1 enables pipelined execution.
    #[serde(default = "default_num_micro_batch")]
    pub num_micro_batch: u64,
    /// Stage count for automatic partitioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_task_graph: Option<usize>,
    /// Partition by balanced search instead of annotations.
    #[serde(default)]
    pub auto_parallel: bool,
    /// Samples per training step.
    pub global_batch: u64,
    /// Bytes of optimizer state per parameter byte (e.g. 2.0 for Adam's two
    /// moments).
    #[serde(default = "default_optimizer_state_multiplier")]
    pub optimizer_state_multiplier: f64,
    /// Backward flop as a multiple of forward flop.
    #[serde(default = "default_backward_flop_multiplier")]
    pub backward_flop_multiplier: f64,
    /// Optimizer-apply flop per parameter byte.
    #[serde(default = "default_apply_flop_per_param_byte")]
    pub apply_flop_per_param_byte: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            num_micro_batch: 1,
            num_task_graph: None,
            auto_parallel: false,
            global_batch: 1,
            optimizer_state_multiplier: default_optimizer_state_multiplier(),
            backward_flop_multiplier: default_backward_flop_multiplier(),
            apply_flop_per_param_byte: default_apply_flop_per_param_byte(),
        }
    }
}

/// Parsed and validated computation graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompGraph {
    /// Tensor table keyed by id (key equals `TensorSpec::id`).
    pub tensors: BTreeMap<String, TensorSpec>,
    /// Ops in definition order; the order is a topological order of the
    /// dataflow.
    pub ops: Vec<OpNode>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
    pub config: PlanConfig,
}

/// Forward cost of one op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCost {
    pub flop: u64,
    /// Bytes of the op's output tensors at the reference batch size.
    pub activation_bytes: u64,
}

// ── Parsing and validation ───────────────────────────────────────────────

/// Parse a model document and validate every structural invariant.
pub fn parse_model(text: &str) -> Result<CompGraph> {
    let graph: CompGraph =
        serde_json::from_str(text).map_err(|e| PlanError::Schema(e.to_string()))?;
    validate(&graph)?;
    Ok(graph)
}

/// Serialize a graph back to document text (stable field and key order).
pub fn to_model_text(graph: &CompGraph) -> String {
    let mut out = serde_json::to_string_pretty(graph).expect("graph serialization cannot fail");
    out.push('\n');
    out
}

/// Validate an in-memory graph (used by `parse_model` and by callers that
/// build graphs programmatically).
pub fn validate(graph: &CompGraph) -> Result<()> {
    validate_tensors(graph)?;
    validate_config(&graph.config)?;
    validate_annotations(graph)?;
    validate_ops(graph)?;
    validate_scope_runs(graph)?;
    Ok(())
}

fn validate_tensors(graph: &CompGraph) -> Result<()> {
    let mut batch_size: Option<u64> = None;
    for (key, t) in &graph.tensors {
        if *key != t.id {
            return Err(PlanError::Schema(format!(
                "tensor map key `{key}` does not match tensor id `{}`",
                t.id
            )));
        }
        if t.shape.is_empty() {
            return Err(PlanError::Schema(format!("tensor `{key}` has empty shape")));
        }
        if t.shape.iter().any(|&d| d == 0) {
            return Err(PlanError::Schema(format!(
                "tensor `{key}` has a zero-sized dimension"
            )));
        }
        if t.elem_bytes == 0 {
            return Err(PlanError::Schema(format!(
                "tensor `{key}` has elem_bytes = 0"
            )));
        }
        if let Some(d) = t.batch_dim {
            if d >= t.shape.len() {
                return Err(PlanError::Schema(format!(
                    "tensor `{key}` batch_dim {d} out of range for rank {}",
                    t.shape.len()
                )));
            }
            let b = t.shape[d];
            match batch_size {
                None => batch_size = Some(b),
                Some(prev) if prev != b => {
                    return Err(PlanError::Schema(format!(
                        "tensor `{key}` declares batch size {b} but another tensor declares {prev}"
                    )));
                }
                Some(_) => {}
            }
        }
    }
    Ok(())
}

fn validate_config(config: &PlanConfig) -> Result<()> {
    if config.global_batch == 0 {
        return Err(PlanError::Schema("global_batch must be positive".into()));
    }
    if config.num_micro_batch == 0 {
        return Err(PlanError::Schema(
            "num_micro_batch must be positive".into(),
        ));
    }
    if config.global_batch % config.num_micro_batch != 0 {
        return Err(PlanError::Schema(format!(
            "global_batch {} is not divisible by num_micro_batch {}",
            config.global_batch, config.num_micro_batch
        )));
    }
    if config.auto_parallel && config.num_task_graph.is_none() {
        return Err(PlanError::Schema(
            "auto_parallel requires num_task_graph".into(),
        ));
    }
    if let Some(n) = config.num_task_graph {
        if n == 0 {
            return Err(PlanError::Schema("num_task_graph must be ≥ 1".into()));
        }
    }
    for (name, v) in [
        (
            "optimizer_state_multiplier",
            config.optimizer_state_multiplier,
        ),
        ("backward_flop_multiplier", config.backward_flop_multiplier),
        (
            "apply_flop_per_param_byte",
            config.apply_flop_per_param_byte,
        ),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(PlanError::Schema(format!(
                "{name} must be finite and non-negative, got {v}"
            )));
        }
    }
    Ok(())
}

fn validate_annotations(graph: &CompGraph) -> Result<()> {
    let mut seen = BTreeSet::new();
    for a in &graph.annotations {
        if !seen.insert(a.scope_id.clone()) {
            return Err(PlanError::Schema(format!(
                "duplicate annotation for scope `{}`",
                a.scope_id
            )));
        }
        match a.strategy {
            StrategyKind::Replicate if a.device_count < 1 => {
                return Err(PlanError::Schema(format!(
                    "replicate annotation `{}` requires device_count ≥ 1",
                    a.scope_id
                )));
            }
            StrategyKind::Split if a.device_count < 2 => {
                return Err(PlanError::Schema(format!(
                    "split annotation `{}` requires device_count ≥ 2",
                    a.scope_id
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

fn validate_ops(graph: &CompGraph) -> Result<()> {
    if graph.ops.is_empty() {
        return Err(PlanError::Schema("model declares no ops".into()));
    }
    let scopes: BTreeSet<&str> = graph.annotations.iter().map(|a| a.scope_id.as_str()).collect();

    // Producer map; every output id must name a known tensor, produced once.
    let mut producer: BTreeMap<&str, usize> = BTreeMap::new();
    let mut op_ids = BTreeSet::new();
    for (i, op) in graph.ops.iter().enumerate() {
        if !op_ids.insert(op.id.as_str()) {
            return Err(PlanError::Schema(format!("duplicate op id `{}`", op.id)));
        }
        if op.outputs.is_empty() {
            return Err(PlanError::Schema(format!(
                "op `{}` produces no outputs",
                op.id
            )));
        }
        if let Some(scope) = &op.scope {
            if !scopes.contains(scope.as_str()) {
                return Err(PlanError::Schema(format!(
                    "op `{}` references unknown scope `{scope}`",
                    op.id
                )));
            }
        }
        for out in &op.outputs {
            if !graph.tensors.contains_key(out) {
                return Err(PlanError::DanglingTensor {
                    op: op.id.clone(),
                    tensor: out.clone(),
                });
            }
            if producer.insert(out.as_str(), i).is_some() {
                return Err(PlanError::Schema(format!(
                    "tensor `{out}` is produced by more than one op"
                )));
            }
        }
    }

    // Inputs must resolve to known tensors; producers must precede
    // consumers. A later-defined producer is either a true cycle or a
    // definition-order violation — distinguish via reachability.
    for (i, op) in graph.ops.iter().enumerate() {
        for input in &op.inputs {
            if !graph.tensors.contains_key(input) {
                return Err(PlanError::DanglingTensor {
                    op: op.id.clone(),
                    tensor: input.clone(),
                });
            }
            if let Some(&p) = producer.get(input.as_str()) {
                if p >= i {
                    if p == i || reaches(graph, i, p) {
                        return Err(PlanError::CycleDetected { op: op.id.clone() });
                    }
                    return Err(PlanError::Schema(format!(
                        "op `{}` consumes tensor `{input}` defined later; \
                         definition order must be topological",
                        op.id
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Is op index `to` reachable from op index `from` along dataflow edges?
fn reaches(graph: &CompGraph, from: usize, to: usize) -> bool {
    let mut stack = vec![from];
    let mut seen = vec![false; graph.ops.len()];
    while let Some(i) = stack.pop() {
        if i == to {
            return true;
        }
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        for out in &graph.ops[i].outputs {
            for (j, op) in graph.ops.iter().enumerate() {
                if !seen[j] && op.inputs.iter().any(|inp| inp == out) {
                    stack.push(j);
                }
            }
        }
    }
    false
}

fn validate_scope_runs(graph: &CompGraph) -> Result<()> {
    let mut closed: BTreeSet<Option<&str>> = BTreeSet::new();
    let mut current: Option<Option<&str>> = None;
    for op in &graph.ops {
        let scope = op.scope.as_deref();
        if current != Some(scope) {
            if let Some(prev) = current {
                closed.insert(prev);
            }
            if closed.contains(&scope) {
                return Err(PlanError::InterleavedScopes {
                    scope: scope.unwrap_or("<default>").to_string(),
                    op: op.id.clone(),
                });
            }
            current = Some(scope);
        }
    }
    Ok(())
}

// ── Cost estimation ──────────────────────────────────────────────────────

/// Reference batch size of the model: the declared size of `batch_dim`,
/// identical across all tensors carrying one. `None` when no tensor has a
/// batch dimension (the model is batch-invariant).
pub fn reference_batch(graph: &CompGraph) -> Option<u64> {
    graph
        .tensors
        .values()
        .find_map(|t| t.batch_dim.map(|d| t.shape[d]))
}

/// Estimate the forward cost of one op at the reference batch size.
///
/// Explicit `flop` overrides the kind's formula. Kinds without a formula
/// (`conv`, `embedding`, `generic`) must declare one. Activation bytes are
/// the summed bytes of the op's output tensors.
pub fn estimate_op_cost(graph: &CompGraph, op: &OpNode) -> Result<OpCost> {
    let activation_bytes = op
        .outputs
        .iter()
        .map(|id| graph.tensors[id].bytes())
        .sum();
    let flop = match op.flop {
        Some(flop) => flop,
        None => match op.kind {
            OpKind::Matmul => {
                let (input, output) = matmul_shapes(graph, op)?;
                2 * input.shape[0] * input.shape[1] * output.shape[1]
            }
            OpKind::Elementwise => op
                .outputs
                .iter()
                .map(|id| graph.tensors[id].elements())
                .sum(),
            OpKind::Softmax => {
                5 * op
                    .outputs
                    .iter()
                    .map(|id| graph.tensors[id].elements())
                    .sum::<u64>()
            }
            OpKind::Conv | OpKind::Embedding | OpKind::Generic => {
                return Err(PlanError::UnprofiledOperator {
                    op: op.id.clone(),
                    kind: op.kind.as_str().to_string(),
                });
            }
        },
    };
    Ok(OpCost {
        flop,
        activation_bytes,
    })
}

/// Resolve and validate a matmul's activation input and output. The weight
/// is implicit: input `[m, k]`, output `[m, n]` imply a `[k, n]` weight.
pub fn matmul_shapes<'g>(
    graph: &'g CompGraph,
    op: &OpNode,
) -> Result<(&'g TensorSpec, &'g TensorSpec)> {
    if op.inputs.len() != 1 || op.outputs.len() != 1 {
        return Err(PlanError::Schema(format!(
            "matmul `{}` must have exactly one input and one output",
            op.id
        )));
    }
    let input = &graph.tensors[&op.inputs[0]];
    let output = &graph.tensors[&op.outputs[0]];
    if input.shape.len() != 2 || output.shape.len() != 2 {
        return Err(PlanError::Schema(format!(
            "matmul `{}` requires rank-2 input and output",
            op.id
        )));
    }
    if input.shape[0] != output.shape[0] {
        return Err(PlanError::Schema(format!(
            "matmul `{}`: input rows {} do not match output rows {}",
            op.id, input.shape[0], output.shape[0]
        )));
    }
    Ok((input, output))
}

/// Forward costs for every op, keyed by op id.
pub fn estimate_graph_costs(graph: &CompGraph) -> Result<BTreeMap<String, OpCost>> {
    let mut costs = BTreeMap::new();
    for op in &graph.ops {
        costs.insert(op.id.clone(), estimate_op_cost(graph, op)?);
    }
    Ok(costs)
}

/// Backward flop per op: `backward_flop_multiplier × forward`, rounded.
pub fn derive_backward_costs(
    graph: &CompGraph,
    forward: &BTreeMap<String, OpCost>,
) -> BTreeMap<String, u64> {
    let m = graph.config.backward_flop_multiplier;
    forward
        .iter()
        .map(|(id, c)| (id.clone(), (c.flop as f64 * m).round() as u64))
        .collect()
}

/// Optimizer-apply flop for one op: a fixed per-parameter-byte constant.
pub fn apply_flop(op: &OpNode, config: &PlanConfig) -> u64 {
    (op.param_bytes as f64 * config.apply_flop_per_param_byte).round() as u64
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Two-op linear model used across the doc examples: x → matmul → h →
    /// matmul → y, weights implicit.
    pub(crate) fn two_op_linear() -> String {
        r#"{
            "tensors": {
                "x": {"id": "x", "shape": [32, 1024], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [32, 1024], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [32, 256], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "fc1", "kind": "matmul", "inputs": ["x"], "outputs": ["h"], "param_bytes": 4194304},
                {"id": "fc2", "kind": "matmul", "inputs": ["h"], "outputs": ["y"], "param_bytes": 1048576}
            ],
            "annotations": [],
            "config": {"global_batch": 32}
        }"#
        .to_string()
    }

    #[test]
    fn parses_two_op_linear_model() {
        let g = parse_model(&two_op_linear()).unwrap();
        assert_eq!(g.ops.len(), 2);
        assert_eq!(g.tensors.len(), 3);
        assert!(g.ops.iter().all(|op| op.scope.is_none()));
        assert_eq!(reference_batch(&g), Some(32));
    }

    #[test]
    fn annotations_parse_with_scopes() {
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [8, 16], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [8, 16], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "body", "kind": "elementwise", "inputs": ["x"], "outputs": ["h"], "scope": "A"},
                {"id": "head", "kind": "matmul", "inputs": ["h"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "replicate", "device_count": 2},
                {"scope_id": "B", "strategy": "split", "device_count": 2}
            ],
            "config": {"global_batch": 8}
        }"#;
        let g = parse_model(text).unwrap();
        assert_eq!(g.annotations.len(), 2);
        assert_eq!(g.annotations[0].strategy, StrategyKind::Replicate);
        assert_eq!(g.annotations[1].strategy, StrategyKind::Split);
    }

    #[test]
    fn dangling_tensor_is_named() {
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [4], "elem_bytes": 4}
            },
            "ops": [
                {"id": "op0", "kind": "elementwise", "inputs": ["t9"], "outputs": ["x"]}
            ],
            "annotations": [],
            "config": {"global_batch": 4}
        }"#;
        match parse_model(text) {
            Err(PlanError::DanglingTensor { op, tensor }) => {
                assert_eq!(op, "op0");
                assert_eq!(tensor, "t9");
            }
            other => panic!("expected dangling-tensor error, got {other:?}"),
        }
    }

    #[test]
    fn cycle_is_detected() {
        let text = r#"{
            "tensors": {
                "a": {"id": "a", "shape": [4], "elem_bytes": 4},
                "b": {"id": "b", "shape": [4], "elem_bytes": 4}
            },
            "ops": [
                {"id": "op0", "kind": "elementwise", "inputs": ["b"], "outputs": ["a"]},
                {"id": "op1", "kind": "elementwise", "inputs": ["a"], "outputs": ["b"]}
            ],
            "annotations": [],
            "config": {"global_batch": 4}
        }"#;
        assert!(matches!(
            parse_model(text),
            Err(PlanError::CycleDetected { .. })
        ));
    }

    #[test]
    fn interleaved_scopes_rejected() {
        let text = r#"{
            "tensors": {
                "t0": {"id": "t0", "shape": [4], "elem_bytes": 4},
                "t1": {"id": "t1", "shape": [4], "elem_bytes": 4},
                "t2": {"id": "t2", "shape": [4], "elem_bytes": 4},
                "t3": {"id": "t3", "shape": [4], "elem_bytes": 4}
            },
            "ops": [
                {"id": "op0", "kind": "elementwise", "inputs": [], "outputs": ["t0"], "scope": "A"},
                {"id": "op1", "kind": "elementwise", "inputs": ["t0"], "outputs": ["t1"], "scope": "B"},
                {"id": "op2", "kind": "elementwise", "inputs": ["t1"], "outputs": ["t2"], "scope": "A"},
                {"id": "op3", "kind": "elementwise", "inputs": ["t2"], "outputs": ["t3"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "replicate", "device_count": 1},
                {"scope_id": "B", "strategy": "replicate", "device_count": 1}
            ],
            "config": {"global_batch": 4}
        }"#;
        match parse_model(text) {
            Err(PlanError::InterleavedScopes { scope, op }) => {
                assert_eq!(scope, "A");
                assert_eq!(op, "op2");
            }
            other => panic!("expected interleaved-scope error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_flop_formula() {
        // [32,1024] × [1024,1024] → 2·32·1024·1024.
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [32, 1024], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [32, 1024], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "mm", "kind": "matmul", "inputs": ["x"], "outputs": ["y"]}
            ],
            "annotations": [],
            "config": {"global_batch": 32}
        }"#;
        let g = parse_model(text).unwrap();
        let cost = estimate_op_cost(&g, &g.ops[0]).unwrap();
        assert_eq!(cost.flop, 67_108_864);
        assert_eq!(cost.activation_bytes, 32 * 1024 * 4);
    }

    #[test]
    fn elementwise_flop_is_element_count() {
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [6, 4], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [6, 4], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "relu", "kind": "elementwise", "inputs": ["x"], "outputs": ["y"]}
            ],
            "annotations": [],
            "config": {"global_batch": 6}
        }"#;
        let g = parse_model(text).unwrap();
        assert_eq!(estimate_op_cost(&g, &g.ops[0]).unwrap().flop, 24);
    }

    #[test]
    fn softmax_flop_is_five_per_element() {
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [2, 10], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [2, 10], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "sm", "kind": "softmax", "inputs": ["x"], "outputs": ["y"]}
            ],
            "annotations": [],
            "config": {"global_batch": 2}
        }"#;
        let g = parse_model(text).unwrap();
        assert_eq!(estimate_op_cost(&g, &g.ops[0]).unwrap().flop, 100);
    }

    #[test]
    fn generic_without_flop_is_unprofiled() {
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [4], "elem_bytes": 4},
                "y": {"id": "y", "shape": [4], "elem_bytes": 4}
            },
            "ops": [
                {"id": "mystery", "kind": "generic", "inputs": ["x"], "outputs": ["y"]}
            ],
            "annotations": [],
            "config": {"global_batch": 4}
        }"#;
        let g = parse_model(text).unwrap();
        match estimate_op_cost(&g, &g.ops[0]) {
            Err(PlanError::UnprofiledOperator { op, kind }) => {
                assert_eq!(op, "mystery");
                assert_eq!(kind, "generic");
            }
            other => panic!("expected unprofiled-operator error, got {other:?}"),
        }
    }

    #[test]
    fn explicit_flop_overrides_formula() {
        let text = r#"{
            "tensors": {
                "x": {"id": "x", "shape": [6, 4], "elem_bytes": 4},
                "y": {"id": "y", "shape": [6, 4], "elem_bytes": 4}
            },
            "ops": [
                {"id": "e", "kind": "elementwise", "inputs": ["x"], "outputs": ["y"], "flop": 999}
            ],
            "annotations": [],
            "config": {"global_batch": 6}
        }"#;
        let g = parse_model(text).unwrap();
        assert_eq!(estimate_op_cost(&g, &g.ops[0]).unwrap().flop, 999);
    }

    #[test]
    fn backward_costs_scale_by_multiplier() {
        let mut g = parse_model(&two_op_linear()).unwrap();
        g.config.backward_flop_multiplier = 2.0;
        let mut forward = BTreeMap::new();
        forward.insert(
            "fc1".to_string(),
            OpCost {
                flop: 100,
                activation_bytes: 0,
            },
        );
        let backward = derive_backward_costs(&g, &forward);
        assert_eq!(backward["fc1"], 200);

        g.config.backward_flop_multiplier = 1.0;
        let backward = derive_backward_costs(&g, &forward);
        assert_eq!(backward["fc1"], 100);
    }

    #[test]
    fn total_step_flop_matches_sum_oracle() {
        let g = parse_model(&two_op_linear()).unwrap();
        let forward = estimate_graph_costs(&g).unwrap();
        let backward = derive_backward_costs(&g, &forward);
        // Oracle computed independently: Σ (1 + multiplier) · forward.
        let m = g.config.backward_flop_multiplier;
        let oracle: f64 = g
            .ops
            .iter()
            .map(|op| (1.0 + m) * forward[&op.id].flop as f64)
            .sum();
        let total: u64 = g
            .ops
            .iter()
            .map(|op| forward[&op.id].flop + backward[&op.id])
            .sum();
        assert_eq!(total as f64, oracle);
    }

    #[test]
    fn round_trip_preserves_structure() {
        let g = parse_model(&two_op_linear()).unwrap();
        let text = to_model_text(&g);
        let g2 = parse_model(&text).unwrap();
        assert_eq!(g, g2);
        // Serialization is deterministic.
        assert_eq!(text, to_model_text(&g2));
    }

    #[test]
    fn non_divisible_micro_batch_rejected() {
        let mut g = parse_model(&two_op_linear()).unwrap();
        g.config.num_micro_batch = 5;
        assert!(matches!(validate(&g), Err(PlanError::Schema(_))));
    }

    #[test]
    fn auto_parallel_requires_num_task_graph() {
        let mut g = parse_model(&two_op_linear()).unwrap();
        g.config.auto_parallel = true;
        assert!(matches!(validate(&g), Err(PlanError::Schema(_))));
        g.config.num_task_graph = Some(2);
        assert!(validate(&g).is_ok());
    }

    #[test]
    fn batch_rescaling_is_linear() {
        let t = TensorSpec {
            id: "x".into(),
            shape: vec![32, 100],
            elem_bytes: 4,
            batch_dim: Some(0),
        };
        assert_eq!(t.bytes(), 12_800);
        assert_eq!(t.bytes_at_batch(8), 3_200);
        let no_batch = TensorSpec {
            id: "w".into(),
            shape: vec![16, 16],
            elem_bytes: 4,
            batch_dim: None,
        };
        assert_eq!(no_batch.bytes_at_batch(8), no_batch.bytes());
    }
}
