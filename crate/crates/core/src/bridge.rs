//! Bridge layers between TaskGraphs with mismatched parallelism.
//!
//! When consecutive TaskGraphs differ in strategy or degree, the
//! producer's output tensors are laid out in a way the consumer cannot
//! consume directly: a Replicate producer holds per-replica batch slices,
//! a Split producer may leave a tensor sharded along its split dimension.
//! A bridge gathers the distributed pieces into a complete tensor —
//! concatenation along the batch dimension (`GatherBatch`) or along the
//! split dimension (`GatherSplit`) — so the consumer starts from a whole
//! tensor.
//!
//! When the consumer immediately re-partitions the gathered tensor on the
//! *same* dimension, the gather + partition pair is redundant: fusing it
//! replaces both with a peer-to-peer re-shard moving only `(k−1)/k` of
//! the tensor. [`fuse_bridges`] marks every such pair; bytes priced by
//! [`BridgeSpec::simulated_bytes`]:
//!
//! | state               | bytes                                  |
//! |---------------------|----------------------------------------|
//! | unfused, no re-part | `gathered`                             |
//! | unfused + re-part   | `gathered + (k−1)/k · gathered`        |
//! | fused               | `(k−1)/k · gathered`                   |
//!
//! Bridges exist only in the cost model: the plan records them as
//! communication events for the simulator, never as executable ops. A
//! boundary tensor already complete on every producer device (e.g. after
//! an in-TaskGraph AllReduce) is strategy-compatible with any consumer
//! and needs no bridge.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::model_ir::{CompGraph, StrategyKind};
use crate::sharding::ShardedTaskGraph;
use crate::taskgraph::TaskGraph;

// ── Types ────────────────────────────────────────────────────────────────

/// How a bridge reassembles the producer's distributed tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// Concatenate per-replica batch slices along the batch dimension.
    GatherBatch { dim: usize },
    /// Concatenate shards along the producer's split dimension.
    GatherSplit { dim: usize },
}

impl BridgeMode {
    /// The dimension the gather concatenates along.
    pub fn gather_dim(&self) -> usize {
        match *self {
            BridgeMode::GatherBatch { dim } | BridgeMode::GatherSplit { dim } => dim,
        }
    }
}

/// One bridge on one inter-TaskGraph boundary tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSpec {
    pub producer_tg: usize,
    pub consumer_tg: usize,
    pub tensor: String,
    pub mode: BridgeMode,
    /// Full tensor bytes at the global micro-batch size.
    pub gathered_bytes: u64,
    /// Bytes scale with the replica's batch share.
    pub batch_scaled: bool,
    /// Consumer parallel degree (the re-shard fan-out).
    pub consumer_degree: usize,
    /// Dimension the consumer partitions the tensor on, when it does.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer_partition_dim: Option<usize>,
    /// Gather + re-partition collapsed into a peer-to-peer re-shard.
    pub fused: bool,
}

impl BridgeSpec {
    /// Re-shard volume `(k−1)/k · gathered_bytes` toward the consumer's
    /// partitions; zero when the consumer keeps the tensor whole.
    fn reshard_bytes(&self) -> u64 {
        if self.consumer_partition_dim.is_none() || self.consumer_degree <= 1 {
            return 0;
        }
        let k = self.consumer_degree as u64;
        self.gathered_bytes * (k - 1) / k
    }

    /// Communication bytes this bridge contributes to the cost model.
    pub fn simulated_bytes(&self) -> u64 {
        if self.fused {
            self.reshard_bytes()
        } else {
            self.gathered_bytes + self.reshard_bytes()
        }
    }
}

// ── Operations ───────────────────────────────────────────────────────────

/// Insert bridges between every pair of consecutive TaskGraphs whose
/// strategy or degree differ.
///
/// Each boundary tensor (produced by the earlier TaskGraph, consumed by
/// the later one) receives at most one [`BridgeSpec`]: a Replicate
/// producer gathers batch slices on the tensor's batch dimension, a Split
/// producer gathers shards on the dimension it left split. `sharded`
/// carries the Split TaskGraphs' rewrites (deferred gathers and entry
/// partitions), keyed by TaskGraph index.
pub fn insert_bridges(
    graph: &CompGraph,
    taskgraphs: &[TaskGraph],
    sharded: &BTreeMap<usize, ShardedTaskGraph>,
) -> Result<Vec<BridgeSpec>> {
    let micro_batch = graph.config.global_batch / graph.config.num_micro_batch;
    let mut bridges = Vec::new();
    for pair in taskgraphs.windows(2) {
        let (producer, consumer) = (&pair[0], &pair[1]);
        if producer.strategy == consumer.strategy {
            continue; // no mismatch, no bridge
        }
        for tensor in boundary_tensors(graph, producer, consumer) {
            let spec = &graph.tensors[&tensor];
            let mode = match producer.strategy.kind {
                StrategyKind::Replicate => match spec.batch_dim {
                    Some(dim) => BridgeMode::GatherBatch { dim },
                    None => {
                        return Err(PlanError::MissingBatchDim {
                            tensor: tensor.clone(),
                        })
                    }
                },
                StrategyKind::Split => {
                    match sharded
                        .get(&producer.index)
                        .and_then(|s| s.deferred_gathers.get(&tensor))
                    {
                        Some(&dim) => BridgeMode::GatherSplit { dim },
                        // Already complete on every producer device:
                        // strategy-compatible with any consumer.
                        None => continue,
                    }
                }
            };
            let consumer_partition_dim = match consumer.strategy.kind {
                StrategyKind::Split => sharded
                    .get(&consumer.index)
                    .and_then(|s| s.entry_partitions.get(&tensor))
                    .copied(),
                StrategyKind::Replicate if consumer.strategy.device_count >= 2 => {
                    spec.batch_dim
                }
                StrategyKind::Replicate => None,
            };
            bridges.push(BridgeSpec {
                producer_tg: producer.index,
                consumer_tg: consumer.index,
                tensor: tensor.clone(),
                mode,
                gathered_bytes: spec.bytes_at_batch(micro_batch),
                batch_scaled: spec.batch_dim.is_some(),
                consumer_degree: consumer.strategy.device_count,
                consumer_partition_dim,
                fused: false,
            });
        }
    }
    Ok(bridges)
}

/// Mark every bridge whose gather dimension equals the consumer's
/// partition dimension as fused. Idempotent; never increases any
/// bridge's simulated bytes.
pub fn fuse_bridges(bridges: &mut [BridgeSpec]) {
    for bridge in bridges {
        bridge.fused = bridge.consumer_partition_dim == Some(bridge.mode.gather_dim());
    }
}

/// Tensors produced by `producer` ops and consumed by `consumer` ops, in
/// producer definition order.
fn boundary_tensors(
    graph: &CompGraph,
    producer: &TaskGraph,
    consumer: &TaskGraph,
) -> Vec<String> {
    let produced: BTreeSet<&str> = producer.op_ids.iter().map(|s| s.as_str()).collect();
    let consumed: BTreeSet<&String> = graph
        .ops
        .iter()
        .filter(|op| consumer.op_ids.contains(&op.id))
        .flat_map(|op| op.inputs.iter())
        .collect();
    let mut seen = BTreeSet::new();
    let mut tensors = Vec::new();
    for op in graph.ops.iter().filter(|op| produced.contains(op.id.as_str())) {
        for out in &op.outputs {
            if consumed.contains(out) && seen.insert(out.clone()) {
                tensors.push(out.clone());
            }
        }
    }
    tensors
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::parse_model;
    use crate::sharding::{apply_split, PatternTable};
    use crate::taskgraph::partition_by_annotation;

    /// Partition an annotated model and shard its Split TaskGraphs.
    fn plan_parts(
        graph: &CompGraph,
    ) -> (Vec<TaskGraph>, BTreeMap<usize, ShardedTaskGraph>) {
        let tgs = partition_by_annotation(graph);
        let table = PatternTable::builtin();
        let mut sharded = BTreeMap::new();
        for tg in &tgs {
            if tg.strategy.kind == StrategyKind::Split {
                sharded.insert(tg.index, apply_split(graph, &table, tg, None).unwrap());
            }
        }
        (tgs, sharded)
    }

    /// Replicate(4) backbone feeding a Split(4) matmul head.
    fn backbone_head_model() -> CompGraph {
        parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [32, 64], "elem_bytes": 4, "batch_dim": 0},
                "f": {"id": "f", "shape": [32, 64], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [32, 100], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "body", "kind": "elementwise", "inputs": ["x"], "outputs": ["f"], "scope": "A"},
                {"id": "head", "kind": "matmul", "inputs": ["f"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "replicate", "device_count": 4},
                {"scope_id": "B", "strategy": "split", "device_count": 4}
            ],
            "config": {"global_batch": 32}
        }"#,
        )
        .unwrap()
    }

    /// Split(2) matmul (column-split output) feeding a Split(4) matmul
    /// whose output is too narrow for SP1 — the consumer partitions the
    /// boundary tensor on the gather dimension.
    fn resharding_model() -> CompGraph {
        parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [32, 16], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [32, 100000], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [32, 2], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "mm1", "kind": "matmul", "inputs": ["x"], "outputs": ["h"], "scope": "A"},
                {"id": "mm2", "kind": "matmul", "inputs": ["h"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "split", "device_count": 2},
                {"scope_id": "B", "strategy": "split", "device_count": 4}
            ],
            "config": {"global_batch": 32}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn replicate_to_split_inserts_gather_batch() {
        let g = backbone_head_model();
        let (tgs, sharded) = plan_parts(&g);
        let bridges = insert_bridges(&g, &tgs, &sharded).unwrap();
        assert_eq!(bridges.len(), 1);
        let b = &bridges[0];
        assert_eq!(b.mode, BridgeMode::GatherBatch { dim: 0 });
        assert_eq!(b.tensor, "f");
        assert_eq!(b.gathered_bytes, 32 * 64 * 4, "full tensor bytes");
        assert_eq!((b.producer_tg, b.consumer_tg), (0, 1));
        assert!(!b.fused);
        // SP1 head consumes the complete tensor: nothing to fuse with.
        assert_eq!(b.consumer_partition_dim, None);
    }

    #[test]
    fn identical_strategy_and_degree_needs_no_bridge() {
        let g = parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "a", "kind": "elementwise", "inputs": ["x"], "outputs": ["h"], "scope": "A"},
                {"id": "b", "kind": "elementwise", "inputs": ["h"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "replicate", "device_count": 2},
                {"scope_id": "B", "strategy": "replicate", "device_count": 2}
            ],
            "config": {"global_batch": 8}
        }"#,
        )
        .unwrap();
        let (tgs, sharded) = plan_parts(&g);
        assert!(insert_bridges(&g, &tgs, &sharded).unwrap().is_empty());
    }

    #[test]
    fn degree_mismatch_alone_bridges_and_fuses_on_batch() {
        // Replicate(4) → Replicate(2): gather the batch, then re-split it
        // across the consumer's replicas — same dimension, so fusion
        // collapses the pair into a re-shard.
        let g = parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "a", "kind": "elementwise", "inputs": ["x"], "outputs": ["h"], "scope": "A"},
                {"id": "b", "kind": "elementwise", "inputs": ["h"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "replicate", "device_count": 4},
                {"scope_id": "B", "strategy": "replicate", "device_count": 2}
            ],
            "config": {"global_batch": 8}
        }"#,
        )
        .unwrap();
        let (tgs, sharded) = plan_parts(&g);
        let mut bridges = insert_bridges(&g, &tgs, &sharded).unwrap();
        assert_eq!(bridges.len(), 1);
        assert_eq!(bridges[0].mode, BridgeMode::GatherBatch { dim: 0 });
        assert_eq!(bridges[0].consumer_partition_dim, Some(0));
        fuse_bridges(&mut bridges);
        assert!(bridges[0].fused);
        let full = 8 * 4 * 4u64;
        assert_eq!(bridges[0].simulated_bytes(), full / 2);
    }

    #[test]
    fn split_producer_gathers_on_split_dim() {
        // Split(2) producer left its output split on dim 1; a
        // strategy-mismatched consumer receives the complete tensor via
        // GatherSplit(1) of the full bytes.
        let g = parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [8, 6], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [8, 6], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "mm", "kind": "matmul", "inputs": ["x"], "outputs": ["h"], "scope": "A"},
                {"id": "ew", "kind": "elementwise", "inputs": ["h"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "split", "device_count": 2},
                {"scope_id": "B", "strategy": "replicate", "device_count": 1}
            ],
            "config": {"global_batch": 8}
        }"#,
        )
        .unwrap();
        let (tgs, sharded) = plan_parts(&g);
        let bridges = insert_bridges(&g, &tgs, &sharded).unwrap();
        assert_eq!(bridges.len(), 1);
        assert_eq!(bridges[0].mode, BridgeMode::GatherSplit { dim: 1 });
        assert_eq!(bridges[0].gathered_bytes, 8 * 6 * 4);
        assert_eq!(bridges[0].consumer_partition_dim, None);
        assert_eq!(bridges[0].simulated_bytes(), 8 * 6 * 4);
    }

    #[test]
    fn missing_batch_dim_is_an_error() {
        let g = parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "w": {"id": "w", "shape": [4, 4], "elem_bytes": 4},
                "y": {"id": "y", "shape": [4, 4], "elem_bytes": 4}
            },
            "ops": [
                {"id": "a", "kind": "generic", "inputs": ["x"], "outputs": ["w"], "scope": "A", "flop": 10},
                {"id": "b", "kind": "elementwise", "inputs": ["w"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "replicate", "device_count": 2},
                {"scope_id": "B", "strategy": "replicate", "device_count": 4}
            ],
            "config": {"global_batch": 8}
        }"#,
        )
        .unwrap();
        let (tgs, sharded) = plan_parts(&g);
        match insert_bridges(&g, &tgs, &sharded) {
            Err(PlanError::MissingBatchDim { tensor }) => assert_eq!(tensor, "w"),
            other => panic!("expected missing-batch-dim error, got {other:?}"),
        }
    }

    #[test]
    fn gather_dim_matching_partition_dim_fuses() {
        // 12.8 MB boundary tensor, consumer degree 4: unfused charges
        // 12.8 MB + 9.6 MB, fused only the 9.6 MB re-shard.
        let g = resharding_model();
        let (tgs, sharded) = plan_parts(&g);
        assert_eq!(
            sharded[&1].entry_partitions.get("h"),
            Some(&1),
            "narrow output forces the contraction split"
        );
        let mut bridges = insert_bridges(&g, &tgs, &sharded).unwrap();
        assert_eq!(bridges.len(), 1);
        let unfused = bridges[0].simulated_bytes();
        assert_eq!(unfused, 12_800_000 + 9_600_000);
        fuse_bridges(&mut bridges);
        assert!(bridges[0].fused);
        assert_eq!(bridges[0].simulated_bytes(), 9_600_000);
    }

    #[test]
    fn fuse_is_idempotent() {
        let g = resharding_model();
        let (tgs, sharded) = plan_parts(&g);
        let mut bridges = insert_bridges(&g, &tgs, &sharded).unwrap();
        fuse_bridges(&mut bridges);
        let once = bridges.clone();
        fuse_bridges(&mut bridges);
        assert_eq!(bridges, once);
    }

    #[test]
    fn fusion_never_increases_bytes() {
        for (partition_dim, degree, gather_dim) in [
            (Some(0), 4, 0),
            (Some(1), 4, 0),
            (Some(1), 2, 1),
            (None, 3, 1),
            (Some(0), 1, 0),
        ] {
            let mut bridge = BridgeSpec {
                producer_tg: 0,
                consumer_tg: 1,
                tensor: "t".into(),
                mode: BridgeMode::GatherSplit { dim: gather_dim },
                gathered_bytes: 1_000_003,
                batch_scaled: true,
                consumer_degree: degree,
                consumer_partition_dim: partition_dim,
                fused: false,
            };
            let before = bridge.simulated_bytes();
            fuse_bridges(std::slice::from_mut(&mut bridge));
            assert!(bridge.simulated_bytes() <= before);
        }
    }

    #[test]
    fn no_same_dim_gather_partition_survives_fusion() {
        let g = resharding_model();
        let (tgs, sharded) = plan_parts(&g);
        let mut bridges = insert_bridges(&g, &tgs, &sharded).unwrap();
        fuse_bridges(&mut bridges);
        for b in &bridges {
            assert!(
                b.consumer_partition_dim != Some(b.mode.gather_dim()) || b.fused,
                "unfused gather followed by a partition on the same dim"
            );
        }
    }

    #[test]
    fn complete_split_output_needs_no_bridge() {
        // The producer's matmul is forced onto the contraction split
        // (output 1 column), so its output leaves the TaskGraph complete
        // after the AllReduce — compatible with any consumer.
        let g = parse_model(
            r#"{
            "tensors": {
                "x": {"id": "x", "shape": [8, 4], "elem_bytes": 4, "batch_dim": 0},
                "h": {"id": "h", "shape": [8, 1], "elem_bytes": 4, "batch_dim": 0},
                "y": {"id": "y", "shape": [8, 1], "elem_bytes": 4, "batch_dim": 0}
            },
            "ops": [
                {"id": "mm", "kind": "matmul", "inputs": ["x"], "outputs": ["h"], "scope": "A"},
                {"id": "ew", "kind": "elementwise", "inputs": ["h"], "outputs": ["y"], "scope": "B"}
            ],
            "annotations": [
                {"scope_id": "A", "strategy": "split", "device_count": 2},
                {"scope_id": "B", "strategy": "replicate", "device_count": 1}
            ],
            "config": {"global_batch": 8}
        }"#,
        )
        .unwrap();
        let (tgs, sharded) = plan_parts(&g);
        assert_eq!(sharded[&0].ops[0].pattern_id, "SP2");
        assert!(insert_bridges(&g, &tgs, &sharded).unwrap().is_empty());
    }
}
