//! TaskGraph formation and profiling.
//!
//! A TaskGraph is a contiguous run of ops owned by one parallelization
//! strategy. TaskGraphs come from annotations (one per scope, in
//! definition order) or from automatic partitioning: an exhaustive search
//! over contiguous cuts that balances per-stage FLOP against the stage
//! devices' compute shares under per-stage memory bounds.
//!
//! Profiling reduces a TaskGraph to the numbers the balancer and the
//! simulator consume: `tg_flop` (forward + backward + optimizer apply per
//! micro-batch) and `tg_mem` (parameters, optimizer state, and the
//! activations of every micro-batch the pipeline keeps in flight). Stage
//! `s` of an `n`-stage pipeline caches `n − s` micro-batches of
//! activations, so the first stage is always the memory-hungriest.

use serde::{Deserialize, Serialize};

use crate::balance;
use crate::cluster::DeviceSpec;
use crate::error::{PlanError, Result};
use crate::model_ir::{self, CompGraph, OpNode, StrategyKind};

// ── Types ────────────────────────────────────────────────────────────────

/// Parallelization strategy of one TaskGraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Devices the TaskGraph occupies within one plan replica.
    pub device_count: usize,
}

impl Strategy {
    pub fn replicate(device_count: usize) -> Strategy {
        Strategy {
            kind: StrategyKind::Replicate,
            device_count,
        }
    }

    pub fn split(device_count: usize) -> Strategy {
        Strategy {
            kind: StrategyKind::Split,
            device_count,
        }
    }
}

/// A contiguous, non-overlapping slice of the model owned by one strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGraph {
    /// Stage index in definition order.
    pub index: usize,
    /// Member op ids, contiguous in graph definition order.
    pub op_ids: Vec<String>,
    pub strategy: Strategy,
}

impl TaskGraph {
    /// Member ops in definition order.
    pub fn member_ops<'g>(&self, graph: &'g CompGraph) -> Vec<&'g OpNode> {
        let members: std::collections::BTreeSet<&str> =
            self.op_ids.iter().map(|s| s.as_str()).collect();
        graph
            .ops
            .iter()
            .filter(|op| members.contains(op.id.as_str()))
            .collect()
    }
}

/// FLOP and peak-memory profile of one TaskGraph at the configured
/// micro-batch size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGraphProfile {
    /// Forward + backward + apply flop per micro-batch.
    pub tg_flop: u64,
    /// Peak memory: `param·(1+optimizer_state_multiplier) +
    /// activation_bytes_per_microbatch · cached_microbatches`.
    pub tg_mem: u64,
    pub forward_flop: u64,
    pub backward_flop: u64,
    pub apply_flop: u64,
    /// Bytes of member-op outputs for one micro-batch.
    pub activation_bytes_per_microbatch: u64,
    pub param_bytes: u64,
    /// Forward activations held concurrently (pipeline stage `s` of `n`
    /// keeps `n − s`).
    pub cached_microbatches: u64,
}

// ── Partitioning by annotation ───────────────────────────────────────────

/// One TaskGraph per annotation scope, in definition order. Runs of ops in
/// the default scope become their own `Replicate(1)` TaskGraph. A graph
/// with no annotations is a single TaskGraph.
pub fn partition_by_annotation(graph: &CompGraph) -> Vec<TaskGraph> {
    let strategy_of = |scope: Option<&str>| -> Strategy {
        match scope {
            None => Strategy::replicate(1),
            Some(id) => {
                let a = graph
                    .annotations
                    .iter()
                    .find(|a| a.scope_id == id)
                    .expect("scope resolved during validation");
                Strategy {
                    kind: a.strategy,
                    device_count: a.device_count,
                }
            }
        }
    };

    let mut taskgraphs: Vec<TaskGraph> = Vec::new();
    for op in &graph.ops {
        let scope = op.scope.as_deref();
        let open_matches = taskgraphs
            .last()
            .is_some_and(|tg: &TaskGraph| scope_of(graph, tg) == scope);
        if open_matches {
            taskgraphs
                .last_mut()
                .expect("checked non-empty")
                .op_ids
                .push(op.id.clone());
        } else {
            taskgraphs.push(TaskGraph {
                index: taskgraphs.len(),
                op_ids: vec![op.id.clone()],
                strategy: strategy_of(scope),
            });
        }
    }
    taskgraphs
}

/// Scope of a TaskGraph's ops (they share one by construction).
fn scope_of<'g>(graph: &'g CompGraph, tg: &TaskGraph) -> Option<&'g str> {
    let first = &tg.op_ids[0];
    graph
        .ops
        .iter()
        .find(|op| &op.id == first)
        .and_then(|op| op.scope.as_deref())
}

// ── Automatic partitioning ───────────────────────────────────────────────

/// Cut the model into `n` contiguous pipeline stages balanced against the
/// per-stage devices.
///
/// Ops stay in definition order (a topological order). The search is
/// exhaustive over contiguous cut positions; models with more than 64 ops
/// are first coalesced into 64 FLOP-weighted groups. A cut is feasible
/// when every stage's memory — profiled with `cached_microbatches = n − s`
/// — fits its device; among feasible cuts the one minimizing
/// `Σ |stage_flop_share − device_flop_share|` wins (ties break toward the
/// lexicographically first cut). `vd_devices` lists one device per stage,
/// already reordered by memory.
pub fn auto_partition(
    graph: &CompGraph,
    n: usize,
    vd_devices: &[DeviceSpec],
) -> Result<Vec<TaskGraph>> {
    if n < 2 {
        return Err(PlanError::Schema(format!(
            "automatic partitioning requires num_task_graph ≥ 2, got {n}"
        )));
    }
    if vd_devices.len() != n {
        return Err(PlanError::Schema(format!(
            "automatic partitioning into {n} stages needs {n} stage devices, got {}",
            vd_devices.len()
        )));
    }
    let m = graph.ops.len();
    if m < n {
        return Err(PlanError::Schema(format!(
            "model has {m} ops; cannot form {n} non-empty stages"
        )));
    }

    // Per-op totals at the configured micro-batch size.
    let per_op = per_op_costs(graph)?;
    let weights: Vec<u128> = per_op.iter().map(|c| c.total_flop()).collect();
    let op_bounds = coalesce_boundaries(&weights, MAX_SEARCH_GROUPS);

    let group = |range: std::ops::Range<usize>| -> (Vec<u128>, Vec<u128>, Vec<u128>) {
        let mut flop = Vec::with_capacity(range.len());
        let mut param = Vec::with_capacity(range.len());
        let mut act = Vec::with_capacity(range.len());
        let mut start = 0usize;
        for &end in &op_bounds {
            let ops = &per_op[start..end];
            flop.push(ops.iter().map(|c| c.total_flop()).sum());
            param.push(ops.iter().map(|c| c.param_bytes as u128).sum());
            act.push(ops.iter().map(|c| c.activation_bytes as u128).sum());
            start = end;
        }
        (flop, param, act)
    };
    let (flop, param_bytes, activation_bytes) = group(0..m);

    let search = CutSearch {
        flop,
        param_bytes,
        activation_bytes,
        mem_bounds: vd_devices.iter().map(|d| d.mem_bytes as u128).collect(),
        targets: balance::init_proportional(vd_devices).ratios,
        optimizer_state_multiplier: graph.config.optimizer_state_multiplier,
    };
    let best = search.best();
    if !best.feasible {
        let stage = best.tight_stage;
        return Err(PlanError::Infeasible(format!(
            "no contiguous {n}-stage cut fits device memory; tightest: stage {stage} \
             needs {} bytes but device `{}` offers {}",
            best.stage_mem[stage], vd_devices[stage].id, vd_devices[stage].mem_bytes
        )));
    }

    // Map group boundaries back to op boundaries and emit the stages.
    let mut stages = Vec::with_capacity(n);
    let mut start_op = 0usize;
    for (index, &b) in best.boundaries.iter().enumerate() {
        let end_op = op_bounds[b - 1];
        stages.push(TaskGraph {
            index,
            op_ids: graph.ops[start_op..end_op]
                .iter()
                .map(|op| op.id.clone())
                .collect(),
            strategy: Strategy::replicate(1),
        });
        start_op = end_op;
    }
    stages.push(TaskGraph {
        index: n - 1,
        op_ids: graph.ops[start_op..]
            .iter()
            .map(|op| op.id.clone())
            .collect(),
        strategy: Strategy::replicate(1),
    });
    Ok(stages)
}

/// Coalescing cap for the cut search: beyond this many ops, adjacent ops
/// merge into this many FLOP-weighted groups.
pub const MAX_SEARCH_GROUPS: usize = 64;

/// Per-op cost row used by partitioning and profiling.
struct OpTotals {
    forward_flop: u64,
    backward_flop: u64,
    apply_flop: u64,
    param_bytes: u64,
    /// Output bytes at the micro-batch size.
    activation_bytes: u64,
}

impl OpTotals {
    fn total_flop(&self) -> u128 {
        self.forward_flop as u128 + self.backward_flop as u128 + self.apply_flop as u128
    }
}

/// Cost every op at micro-batch scale: forward flop rescaled from the
/// reference batch, backward as a multiple of forward, apply from
/// parameter bytes, activations at the micro-batch size.
fn per_op_costs(graph: &CompGraph) -> Result<Vec<OpTotals>> {
    let config = &graph.config;
    let micro_batch = config.global_batch / config.num_micro_batch;
    let reference = model_ir::reference_batch(graph);
    graph
        .ops
        .iter()
        .map(|op| {
            let cost = model_ir::estimate_op_cost(graph, op)?;
            let batch_carrying = op
                .outputs
                .iter()
                .any(|id| graph.tensors[id].batch_dim.is_some());
            let forward_flop = match (batch_carrying, reference) {
                (true, Some(b)) => scale_flop(cost.flop, micro_batch, b),
                _ => cost.flop,
            };
            let backward_flop =
                (forward_flop as f64 * config.backward_flop_multiplier).round() as u64;
            let activation_bytes = op
                .outputs
                .iter()
                .map(|id| graph.tensors[id].bytes_at_batch(micro_batch))
                .sum();
            Ok(OpTotals {
                forward_flop,
                backward_flop,
                apply_flop: model_ir::apply_flop(op, config),
                param_bytes: op.param_bytes,
                activation_bytes,
            })
        })
        .collect()
}

/// Rescale a flop count from `reference` batch samples to `batch`,
/// rounding half up. Formula-derived costs are batch-linear, so the
/// division is exact for them.
fn scale_flop(flop: u64, batch: u64, reference: u64) -> u64 {
    if batch == reference {
        return flop;
    }
    let num = flop as u128 * batch as u128 + reference as u128 / 2;
    (num / reference as u128) as u64
}

/// Partition `weights.len()` ops into at most `groups` contiguous groups
/// with near-equal weight. Returns exclusive end indices (the last is
/// always `weights.len()`).
fn coalesce_boundaries(weights: &[u128], groups: usize) -> Vec<usize> {
    let m = weights.len();
    let g = groups.min(m);
    let total: u128 = weights.iter().sum();
    let mut bounds = Vec::with_capacity(g);
    let mut acc: u128 = 0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        let closed = bounds.len();
        if closed == g - 1 {
            break;
        }
        let remaining_ops = m - i - 1;
        let remaining_groups = g - closed - 1;
        // Close the group at its proportional share, or when every
        // remaining group needs one of the remaining ops.
        if acc * g as u128 >= total * (closed as u128 + 1) || remaining_ops == remaining_groups {
            bounds.push(i + 1);
        }
    }
    bounds.push(m);
    bounds
}

// ── Cut search ───────────────────────────────────────────────────────────

/// Inputs of the stage-cut search, one entry per contiguous group.
///
/// `targets[s]` is stage `s`'s device compute share (DF_s / Σ DF);
/// `mem_bounds[s]` its device memory. The search is exposed with
/// sequential and parallel solvers producing bit-identical results, so
/// the two can be benchmarked against each other.
#[derive(Debug, Clone)]
pub struct CutSearch {
    pub flop: Vec<u128>,
    pub param_bytes: Vec<u128>,
    pub activation_bytes: Vec<u128>,
    pub mem_bounds: Vec<u128>,
    pub targets: Vec<f64>,
    pub optimizer_state_multiplier: f64,
}

/// Outcome of evaluating one cut (and the search's winner).
#[derive(Debug, Clone, PartialEq)]
pub struct CutCandidate {
    /// Exclusive group boundaries of the first `n−1` stages, ascending.
    pub boundaries: Vec<usize>,
    /// All stage memories within bounds?
    pub feasible: bool,
    /// Σ |stage flop share − target share| (meaningful when feasible).
    pub objective: f64,
    /// Largest stage memory overflow in bytes (0 when feasible).
    pub violation: u128,
    /// Stage with the largest overflow.
    pub tight_stage: usize,
    /// Stage memory in bytes under this cut.
    pub stage_mem: Vec<u128>,
}

impl CutSearch {
    fn n(&self) -> usize {
        self.targets.len()
    }

    fn m(&self) -> usize {
        self.flop.len()
    }

    /// Best cut via the parallel solver when the `parallel` feature is on,
    /// the sequential one otherwise (identical results either way).
    pub fn best(&self) -> CutCandidate {
        #[cfg(feature = "parallel")]
        {
            self.best_par()
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.best_seq()
        }
    }

    /// Exhaustive sequential search over all contiguous cuts.
    pub fn best_seq(&self) -> CutCandidate {
        let n_cuts = self.n() - 1;
        let mut best: Option<CutCandidate> = None;
        let mut bounds = Vec::with_capacity(n_cuts);
        self.recurse(&mut bounds, &mut best);
        best.expect("at least one cut exists (m ≥ n)")
    }

    /// Exhaustive parallel search, fanned out over the first cut position.
    /// The reduction is a total order over candidates, so the winner is
    /// bit-identical to [`CutSearch::best_seq`].
    #[cfg(feature = "parallel")]
    pub fn best_par(&self) -> CutCandidate {
        use rayon::prelude::*;
        let (n, m) = (self.n(), self.m());
        if n == 1 {
            return self.evaluate(&[]);
        }
        (1..=m - n + 1)
            .into_par_iter()
            .map(|first| {
                let mut best: Option<CutCandidate> = None;
                let mut bounds = Vec::with_capacity(n - 1);
                bounds.push(first);
                self.recurse(&mut bounds, &mut best);
                best.expect("suffix cuts exist for every first boundary")
            })
            .reduce_with(better)
            .expect("at least one first boundary (m ≥ n)")
    }

    fn recurse(&self, bounds: &mut Vec<usize>, best: &mut Option<CutCandidate>) {
        let n_cuts = self.n() - 1;
        if bounds.len() == n_cuts {
            let candidate = self.evaluate(bounds);
            *best = Some(match best.take() {
                None => candidate,
                Some(b) => better(b, candidate),
            });
            return;
        }
        let lo = bounds.last().map_or(1, |&b| b + 1);
        let hi = self.m() - (n_cuts - bounds.len());
        for b in lo..=hi {
            bounds.push(b);
            self.recurse(bounds, best);
            bounds.pop();
        }
    }

    /// Score one cut: per-stage flop share error and memory feasibility,
    /// with stage `s` caching `n − s` micro-batches of activations.
    pub fn evaluate(&self, boundaries: &[usize]) -> CutCandidate {
        let n = self.n();
        let total_flop: u128 = self.flop.iter().sum();
        let mut objective = 0.0;
        let mut stage_mem = Vec::with_capacity(n);
        let mut violation: u128 = 0;
        let mut tight_stage = 0usize;
        let mut start = 0usize;
        for s in 0..n {
            let end = if s + 1 < n {
                boundaries[s]
            } else {
                self.m()
            };
            let flop: u128 = self.flop[start..end].iter().sum();
            let param: u128 = self.param_bytes[start..end].iter().sum();
            let act: u128 = self.activation_bytes[start..end].iter().sum();
            let share = if total_flop == 0 {
                0.0
            } else {
                flop as f64 / total_flop as f64
            };
            objective += (share - self.targets[s]).abs();
            let cached = (n - s) as u128;
            let param_term =
                (param as f64 * (1.0 + self.optimizer_state_multiplier)).round() as u128;
            let mem = param_term + act * cached;
            if mem > self.mem_bounds[s] {
                let over = mem - self.mem_bounds[s];
                if over > violation {
                    violation = over;
                    tight_stage = s;
                }
            }
            stage_mem.push(mem);
            start = end;
        }
        CutCandidate {
            boundaries: boundaries.to_vec(),
            feasible: violation == 0,
            objective,
            violation,
            tight_stage,
            stage_mem,
        }
    }
}

/// Total order over candidates: feasibility first, then objective, then
/// the lexicographically first cut; infeasible cuts rank by violation.
fn better(a: CutCandidate, b: CutCandidate) -> CutCandidate {
    use std::cmp::Ordering;
    let ord = match (a.feasible, b.feasible) {
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (true, true) => a
            .objective
            .total_cmp(&b.objective)
            .then_with(|| a.boundaries.cmp(&b.boundaries)),
        (false, false) => a
            .violation
            .cmp(&b.violation)
            .then_with(|| a.boundaries.cmp(&b.boundaries)),
    };
    match ord {
        Ordering::Greater => b,
        _ => a,
    }
}

// ── Profiling ────────────────────────────────────────────────────────────

/// Profile a TaskGraph at the configured micro-batch size.
///
/// `tg_flop` sums forward, backward, and optimizer-apply flop of the
/// member ops; `tg_mem = param·(1+optimizer_state_multiplier) +
/// activation_bytes_per_microbatch · cached_microbatches`.
pub fn profile_taskgraph(
    graph: &CompGraph,
    tg: &TaskGraph,
    cached_microbatches: u64,
) -> Result<TaskGraphProfile> {
    assert!(cached_microbatches >= 1, "a running stage caches ≥ 1 micro-batch");
    let all = per_op_costs(graph)?;
    let members: std::collections::BTreeSet<&str> =
        tg.op_ids.iter().map(|s| s.as_str()).collect();
    let rows: Vec<&OpTotals> = graph
        .ops
        .iter()
        .zip(&all)
        .filter(|(op, _)| members.contains(op.id.as_str()))
        .map(|(_, row)| row)
        .collect();

    let forward_flop: u64 = rows.iter().map(|r| r.forward_flop).sum();
    let backward_flop: u64 = rows.iter().map(|r| r.backward_flop).sum();
    let apply: u64 = rows.iter().map(|r| r.apply_flop).sum();
    let param_bytes: u64 = rows.iter().map(|r| r.param_bytes).sum();
    let activation_bytes_per_microbatch: u64 =
        rows.iter().map(|r| r.activation_bytes).sum();

    let param_term =
        (param_bytes as f64 * (1.0 + graph.config.optimizer_state_multiplier)).round() as u64;
    Ok(TaskGraphProfile {
        tg_flop: forward_flop + backward_flop + apply,
        tg_mem: param_term + activation_bytes_per_microbatch * cached_microbatches,
        forward_flop,
        backward_flop,
        apply_flop: apply,
        activation_bytes_per_microbatch,
        param_bytes,
        cached_microbatches,
    })
}

// ── Tests ────────────────────────────────────────────────────────────────
