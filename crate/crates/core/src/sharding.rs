//! Intra-tensor sharding for Split TaskGraphs.
//!
//! Each op of a Split TaskGraph is a *sharding unit*; the unit plus the
//! sharding state of its inputs is matched against a pattern table, and
//! the matched pattern with the lowest communication cost rewrites the op
//! into a distributed implementation. Ring-collective byte proxies price
//! the candidates: an AllGather moves `(k−1)/k` of the tensor, an
//! AllReduce twice that.
//!
//! The built-in table covers the two matmul patterns plus pass-throughs:
//!
//! | id  | unit        | inputs             | rewrite                                    |
//! |-----|-------------|--------------------|--------------------------------------------|
//! | SP1 | matmul      | activation complete| weight column-split; output column-split   |
//! | SP2 | matmul      | complete or [0,1]  | contraction split; AllReduce; output whole |
//! | EW  | elementwise | any (equal) infos  | pass-through                               |
//! | SM  | softmax     | last dim unsplit   | pass-through                               |
//!
//! SP1 leaves its output split with a *pending* AllGather: the gather
//! materializes only when a later unit actually needs the complete tensor
//! (SP2 consumes the split form natively), and a gather still pending at
//! the TaskGraph boundary is deferred to the bridge layer. Weights are
//! implicit in the graph, so a matmul `[m,c] → [m,n]` shards its `[c,n]`
//! weight by rows (SP2) or columns (SP1).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::balance::LoadAssignment;
use crate::error::{PlanError, Result};
use crate::model_ir::{matmul_shapes, CompGraph, OpKind, OpNode};
use crate::taskgraph::TaskGraph;

// ── Types ────────────────────────────────────────────────────────────────

/// Per-dimension split flags of one tensor (1 = split this dimension).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardingInfo {
    pub dims: Vec<u8>,
}

impl ShardingInfo {
    /// Unsplit tensor of the given rank.
    pub fn complete(rank: usize) -> ShardingInfo {
        ShardingInfo {
            dims: vec![0; rank],
        }
    }

    /// Tensor split on exactly `dim`.
    pub fn split_on(rank: usize, dim: usize) -> ShardingInfo {
        let mut dims = vec![0; rank];
        dims[dim] = 1;
        ShardingInfo { dims }
    }

    pub fn is_complete(&self) -> bool {
        self.dims.iter().all(|&d| d == 0)
    }

    /// The single split dimension, when exactly one is split.
    pub fn split_dim(&self) -> Option<usize> {
        let mut split = self.dims.iter().enumerate().filter(|(_, &d)| d != 0);
        match (split.next(), split.next()) {
            (Some((dim, _)), None) => Some(dim),
            _ => None,
        }
    }
}

/// A basic unit for sharding: one op together with the sharding state of
/// its inputs.
#[derive(Debug, Clone)]
pub struct MatchContext<'g> {
    pub graph: &'g CompGraph,
    pub op: &'g OpNode,
    /// Current info of each input, aligned with `op.inputs`.
    pub input_infos: Vec<ShardingInfo>,
    /// Pending-gather dimension of each input, when its producer left it
    /// split.
    pub input_pending: Vec<Option<usize>>,
    /// Shard count.
    pub k: usize,
}

/// Collective kinds the cost model distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommKind {
    None,
    AllGather,
    AllReduce,
}

/// What applying a pattern does to the unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternRewrite {
    /// Info of each output after the rewrite.
    pub output_infos: Vec<ShardingInfo>,
    /// Output left split on this dim, gather deferred.
    pub pending_gather: Option<usize>,
    /// Immediate AllReduce of the outputs.
    pub allreduce: bool,
    /// `(input index, dim)` partitions applied to complete inputs.
    pub entry_partitions: Vec<(usize, usize)>,
    /// Size of the dimension divided across devices (drives shard sizing).
    pub split_dim_size: Option<u64>,
}

/// One rewrite rule: an operator class plus an input-compatibility
/// predicate producing the distributed implementation.
#[derive(Clone)]
pub struct ShardingPattern {
    /// Identifier; ties on cost break toward the lower id.
    pub id: String,
    pub unit_kind: OpKind,
    /// Collective the rewrite inserts (prices the pattern).
    pub comm: CommKind,
    /// Returns the rewrite when the pattern applies to the unit.
    pub matcher: fn(&MatchContext) -> Option<PatternRewrite>,
}

impl std::fmt::Debug for ShardingPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardingPattern")
            .field("id", &self.id)
            .field("unit_kind", &self.unit_kind)
            .field("comm", &self.comm)
            .finish()
    }
}

/// Compiled-in pattern table; extensible via [`PatternTable::register`].
#[derive(Debug, Clone)]
pub struct PatternTable {
    patterns: Vec<ShardingPattern>,
}

/// A collective recorded on the plan (simulated, not executed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Collective {
    pub kind: CommKind,
    pub tensor: String,
    /// Gathered dimension (AllGather only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Full tensor bytes at the global micro-batch size; ring factors are
    /// applied by the simulator's time model.
    pub bytes: u64,
    /// Bytes scale with the replica's batch share.
    pub batch_scaled: bool,
}

/// One op after sharding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardedOp {
    pub op_id: String,
    pub pattern_id: String,
    /// Per-device sizes along the pattern's split dimension (weight
    /// columns for SP1, contraction rows for SP2); empty for
    /// pass-throughs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shard_sizes: Vec<u64>,
    /// Collectives charged to this op's forward pass (materialized input
    /// gathers first, then the pattern's own collective).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub collectives: Vec<Collective>,
}

/// A Split TaskGraph rewritten into its distributed implementation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardedTaskGraph {
    pub taskgraph_index: usize,
    /// Shard count k.
    pub degree: usize,
    pub ops: Vec<ShardedOp>,
    /// Boundary tensors this TaskGraph partitions on entry (tensor → dim);
    /// the bridge layer fuses a matching gather with these.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub entry_partitions: BTreeMap<String, usize>,
    /// Produced tensors left split (tensor → dim), gathered by the bridge
    /// or the consumer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub deferred_gathers: BTreeMap<String, usize>,
}

impl ShardedTaskGraph {
    /// Total collective bytes charged per forward pass (before ring
    /// factors).
    pub fn collective_bytes(&self) -> u64 {
        self.ops
            .iter()
            .flat_map(|op| op.collectives.iter())
            .map(|c| c.bytes)
            .sum()
    }
}

// ── Pattern table ────────────────────────────────────────────────────────

impl PatternTable {
    /// The built-in patterns: SP1, SP2, EW, SM.
    pub fn builtin() -> PatternTable {
        PatternTable {
            patterns: vec![
                ShardingPattern {
                    id: "SP1".into(),
                    unit_kind: OpKind::Matmul,
                    comm: CommKind::AllGather,
                    matcher: match_sp1,
                },
                ShardingPattern {
                    id: "SP2".into(),
                    unit_kind: OpKind::Matmul,
                    comm: CommKind::AllReduce,
                    matcher: match_sp2,
                },
                ShardingPattern {
                    id: "EW".into(),
                    unit_kind: OpKind::Elementwise,
                    comm: CommKind::None,
                    matcher: match_elementwise,
                },
                ShardingPattern {
                    id: "SM".into(),
                    unit_kind: OpKind::Softmax,
                    comm: CommKind::None,
                    matcher: match_softmax,
                },
            ],
        }
    }

    /// Register an additional pattern (appended after the built-ins).
    pub fn register(&mut self, pattern: ShardingPattern) {
        self.patterns.push(pattern);
    }

    /// All patterns compatible with the unit, in table order.
    pub fn match_patterns(&self, ctx: &MatchContext) -> Vec<&ShardingPattern> {
        self.patterns
            .iter()
            .filter(|p| p.unit_kind == ctx.op.kind && (p.matcher)(ctx).is_some())
            .collect()
    }
}

/// SP1: complete activation, weight split by columns. The output comes
/// out column-split with its gather pending.
fn match_sp1(ctx: &MatchContext) -> Option<PatternRewrite> {
    let (_, output) = matmul_shapes(ctx.graph, ctx.op).ok()?;
    if !ctx.input_infos[0].is_complete() {
        return None;
    }
    let n = output.shape[1];
    if n < ctx.k as u64 {
        return None;
    }
    Some(PatternRewrite {
        output_infos: vec![ShardingInfo::split_on(2, 1)],
        pending_gather: Some(1),
        allreduce: false,
        entry_partitions: Vec::new(),
        split_dim_size: Some(n),
    })
}

/// SP2: contraction dimension split — activation by columns, weight by
/// rows — with an immediate AllReduce of the partial products. Consumes a
/// `[0,1]`-split activation natively; a complete activation is partitioned
/// on entry.
fn match_sp2(ctx: &MatchContext) -> Option<PatternRewrite> {
    let (input, _) = matmul_shapes(ctx.graph, ctx.op).ok()?;
    let info = &ctx.input_infos[0];
    let complete = info.is_complete();
    if !complete && info.dims != [0, 1] {
        return None;
    }
    let c = input.shape[1];
    if c < ctx.k as u64 {
        return None;
    }
    Some(PatternRewrite {
        output_infos: vec![ShardingInfo::complete(2)],
        pending_gather: None,
        allreduce: true,
        entry_partitions: if complete { vec![(0, 1)] } else { Vec::new() },
        split_dim_size: Some(c),
    })
}

/// EW: elementwise ops commute with any sharding; all inputs must agree.
fn match_elementwise(ctx: &MatchContext) -> Option<PatternRewrite> {
    pass_through(ctx, |_| true)
}

/// SM: softmax normalizes over the last dimension, so it passes through
/// any info that leaves the last dimension unsplit.
fn match_softmax(ctx: &MatchContext) -> Option<PatternRewrite> {
    pass_through(ctx, |info| info.dims.last() != Some(&1))
}

/// Shared pass-through matcher: inputs carry one common info accepted by
/// `admit`, outputs of the same rank inherit it (pending gathers
/// propagate — a gather commutes with the op).
fn pass_through(
    ctx: &MatchContext,
    admit: fn(&ShardingInfo) -> bool,
) -> Option<PatternRewrite> {
    let common = match ctx.input_infos.first() {
        None => None,
        Some(first) => {
            if ctx.input_infos.iter().any(|i| i != first) {
                return None;
            }
            Some(first.clone())
        }
    };
    let rank_of = |id: &String| ctx.graph.tensors[id].shape.len();
    let output_infos: Vec<ShardingInfo> = ctx
        .op
        .outputs
        .iter()
        .map(|id| match &common {
            Some(info) if info.dims.len() == rank_of(id) => info.clone(),
            _ => ShardingInfo::complete(rank_of(id)),
        })
        .collect();
    if let Some(info) = &common {
        if !admit(info) {
            return None;
        }
        if ctx
            .op
            .outputs
            .iter()
            .any(|id| rank_of(id) != info.dims.len())
            && !info.is_complete()
        {
            return None; // cannot carry a split info across a rank change
        }
    }
    Some(PatternRewrite {
        pending_gather: ctx.input_pending.first().copied().flatten(),
        output_infos,
        allreduce: false,
        entry_partitions: Vec::new(),
        split_dim_size: None,
    })
}

// ── Costing ──────────────────────────────────────────────────────────────

/// Ring-collective byte proxy of a pattern on a unit whose (full) output
/// holds `output_bytes`: AllReduce `2·(k−1)/k·bytes`, AllGather
/// `(k−1)/k·bytes`, none 0. One device communicates nothing.
pub fn pattern_comm_cost(pattern: &ShardingPattern, output_bytes: u64, k: usize) -> u64 {
    comm_cost(pattern.comm, output_bytes, k)
}

fn comm_cost(kind: CommKind, bytes: u64, k: usize) -> u64 {
    if k <= 1 {
        return 0;
    }
    let k = k as u64;
    match kind {
        CommKind::None => 0,
        CommKind::AllGather => bytes * (k - 1) / k,
        CommKind::AllReduce => 2 * bytes * (k - 1) / k,
    }
}

// ── Applying a split ─────────────────────────────────────────────────────

/// Sharding state of one produced tensor.
#[derive(Debug, Clone)]
struct TensorState {
    info: ShardingInfo,
    pending: Option<usize>,
}

/// Rewrite a Split TaskGraph into its distributed implementation.
///
/// Units are processed in definition (topological) order. For each unit
/// the minimum-cost matched pattern applies, ties breaking toward the
/// lower pattern id; when nothing matches the current infos, pending
/// input gathers are materialized (charged to this unit) and matching
/// retries. Shard sizes along the split dimension follow `load_ratios`
/// (largest remainder, every shard ≥ 1) or split evenly when absent.
pub fn apply_split(
    graph: &CompGraph,
    table: &PatternTable,
    tg: &TaskGraph,
    load_ratios: Option<&LoadAssignment>,
) -> Result<ShardedTaskGraph> {
    let k = tg.strategy.device_count;
    let micro_batch = graph.config.global_batch / graph.config.num_micro_batch;
    let even = vec![1.0 / k as f64; k];
    let ratios: &[f64] = load_ratios.map_or(&even, |a| &a.ratios);

    let members: BTreeSet<&str> = tg.op_ids.iter().map(|s| s.as_str()).collect();
    let mut states: BTreeMap<String, TensorState> = BTreeMap::new();
    let state_of = |states: &BTreeMap<String, TensorState>, id: &str| -> TensorState {
        states.get(id).cloned().unwrap_or_else(|| TensorState {
            info: ShardingInfo::complete(graph.tensors[id].shape.len()),
            pending: None,
        })
    };

    let mut ops = Vec::new();
    let mut entry_partitions = BTreeMap::new();
    for op in graph.ops.iter().filter(|op| members.contains(op.id.as_str())) {
        let build_ctx = |states: &BTreeMap<String, TensorState>| -> MatchContext {
            let inputs: Vec<TensorState> =
                op.inputs.iter().map(|id| state_of(states, id)).collect();
            MatchContext {
                graph,
                op,
                input_infos: inputs.iter().map(|s| s.info.clone()).collect(),
                input_pending: inputs.iter().map(|s| s.pending).collect(),
                k,
            }
        };

        let mut collectives = Vec::new();
        let mut ctx = build_ctx(&states);
        let mut candidates = matched_rewrites(table, &ctx);
        if candidates.is_empty() {
            // Nothing handles the split inputs directly: materialize their
            // pending gathers here and retry on complete tensors.
            let mut gathered = false;
            for input in &op.inputs {
                let state = state_of(&states, input);
                if let Some(dim) = state.pending {
                    collectives.push(Collective {
                        kind: CommKind::AllGather,
                        tensor: input.clone(),
                        dim: Some(dim),
                        bytes: graph.tensors[input].bytes_at_batch(micro_batch),
                        batch_scaled: graph.tensors[input].batch_dim.is_some(),
                    });
                    states.insert(
                        input.clone(),
                        TensorState {
                            info: ShardingInfo::complete(graph.tensors[input].shape.len()),
                            pending: None,
                        },
                    );
                    gathered = true;
                }
            }
            if gathered {
                ctx = build_ctx(&states);
                candidates = matched_rewrites(table, &ctx);
            }
        }
        let Some((pattern, rewrite)) = select(candidates, graph, op, micro_batch, k) else {
            return Err(unmatched_error(graph, op, k));
        };

        if rewrite.allreduce {
            for out in &op.outputs {
                collectives.push(Collective {
                    kind: CommKind::AllReduce,
                    tensor: out.clone(),
                    dim: None,
                    bytes: graph.tensors[out].bytes_at_batch(micro_batch),
                    batch_scaled: graph.tensors[out].batch_dim.is_some(),
                });
            }
        }
        for &(input_index, dim) in &rewrite.entry_partitions {
            let tensor = &op.inputs[input_index];
            // Only partitions of tensors produced outside this TaskGraph
            // matter to the bridge layer.
            if !states.contains_key(tensor) {
                entry_partitions.entry(tensor.clone()).or_insert(dim);
            }
        }
        let shard_sizes = match rewrite.split_dim_size {
            Some(size) => proportional_shards(ratios, size, &op.id, k)?,
            None => Vec::new(),
        };
        for (out, info) in op.outputs.iter().zip(&rewrite.output_infos) {
            states.insert(
                out.clone(),
                TensorState {
                    info: info.clone(),
                    pending: rewrite.pending_gather,
                },
            );
        }
        ops.push(ShardedOp {
            op_id: op.id.clone(),
            pattern_id: pattern.id.clone(),
            shard_sizes,
            collectives,
        });
    }

    // Gathers still pending on tensors that escape the TaskGraph are the
    // bridge layer's job.
    let mut deferred_gathers = BTreeMap::new();
    for (tensor, state) in &states {
        if let Some(dim) = state.pending {
            if escapes(graph, &members, tensor) {
                deferred_gathers.insert(tensor.clone(), dim);
            }
        }
    }
    Ok(ShardedTaskGraph {
        taskgraph_index: tg.index,
        degree: k,
        ops,
        entry_partitions,
        deferred_gathers,
    })
}

/// All (pattern, rewrite) pairs matching the unit.
fn matched_rewrites<'t>(
    table: &'t PatternTable,
    ctx: &MatchContext,
) -> Vec<(&'t ShardingPattern, PatternRewrite)> {
    table
        .patterns
        .iter()
        .filter(|p| p.unit_kind == ctx.op.kind)
        .filter_map(|p| (p.matcher)(ctx).map(|r| (p, r)))
        .collect()
}

/// Minimum-cost candidate; ties break toward the lower pattern id.
fn select<'t>(
    candidates: Vec<(&'t ShardingPattern, PatternRewrite)>,
    graph: &CompGraph,
    op: &OpNode,
    micro_batch: u64,
    k: usize,
) -> Option<(&'t ShardingPattern, PatternRewrite)> {
    let output_bytes: u64 = op
        .outputs
        .iter()
        .map(|id| graph.tensors[id].bytes_at_batch(micro_batch))
        .sum();
    candidates.into_iter().min_by(|(a, _), (b, _)| {
        pattern_comm_cost(a, output_bytes, k)
            .cmp(&pattern_comm_cost(b, output_bytes, k))
            .then_with(|| a.id.cmp(&b.id))
    })
}

/// Classify why a unit stayed unmatched: dims too small for the matmul
/// patterns, or no table entry for the kind at all.
fn unmatched_error(graph: &CompGraph, op: &OpNode, k: usize) -> PlanError {
    if op.kind == OpKind::Matmul {
        if let Ok((input, output)) = matmul_shapes(graph, op) {
            let widest = input.shape[1].max(output.shape[1]);
            if widest < k as u64 {
                return PlanError::UnsplittableDimension {
                    op: op.id.clone(),
                    dim_size: widest,
                    shards: k,
                };
            }
        }
    }
    PlanError::UnsupportedSplit {
        op: op.id.clone(),
        kind: op.kind.as_str().to_string(),
    }
}

/// Does a tensor produced inside the TaskGraph leave it (consumed by an
/// outside op, or by nothing — a graph output)?
fn escapes(graph: &CompGraph, members: &BTreeSet<&str>, tensor: &str) -> bool {
    let mut consumed = false;
    for op in &graph.ops {
        if op.inputs.iter().any(|i| i == tensor) {
            consumed = true;
            if !members.contains(op.id.as_str()) {
                return true;
            }
        }
    }
    !consumed
}

/// Shard a dimension of `dim_size` proportionally to `ratios` by largest
/// remainder; every shard receives at least one element.
pub fn proportional_shards(
    ratios: &[f64],
    dim_size: u64,
    op: &str,
    k: usize,
) -> Result<Vec<u64>> {
    debug_assert_eq!(ratios.len(), k);
    if dim_size < k as u64 {
        return Err(PlanError::UnsplittableDimension {
            op: op.to_string(),
            dim_size,
            shards: k,
        });
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r * dim_size as f64).collect();
    let mut shards: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = shards.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take((dim_size - assigned) as usize) {
        shards[i] += 1;
    }
    while shards.iter().any(|&s| s == 0) {
        let zero = shards.iter().position(|&s| s == 0).expect("checked");
        let donor = (0..k)
            .max_by(|&a, &b| shards[a].cmp(&shards[b]).then(b.cmp(&a)))
            .expect("non-empty");
        shards[donor] -= 1;
        shards[zero] += 1;
    }
    debug_assert_eq!(shards.iter().sum::<u64>(), dim_size);
    Ok(shards)
}

// ── Tests ────────────────────────────────────────────────────────────────
