//! Plan assembly: from an annotated graph and a cluster to a complete,
//! serializable execution plan.
//!
//! [`build_plan`] runs the full pipeline:
//!
//! 1. partition the graph into TaskGraphs (annotations, or balanced
//!    search when `auto_parallel` is set);
//! 2. generate virtual devices — disjoint sequential groups with nested
//!    data parallelism, or a whole-cluster overlay when every TaskGraph
//!    requests all devices (the replicate-backbone / split-head hybrid);
//! 3. reorder pipeline devices by memory so earlier stages, which cache
//!    more activations, land on larger devices;
//! 4. profile each stage (stage `s` of `N` caches `N − s` micro-batches);
//! 5. balance per-device load ratios within multi-device stages, shard
//!    Split stages, and split the global batch across replicas in
//!    proportion to their aggregate capability;
//! 6. insert bridges between mismatched stages and fuse redundant
//!    gather/partition pairs;
//! 7. record gradient-synchronization groups (per-stage AllReduce within
//!    a replica, per-device-slot AllReduce across replicas).
//!
//! The resulting [`ExecutionPlan`] embeds the cluster and config, so the
//! simulator needs no other inputs, and serializes deterministically (all
//! maps are ordered; field order is fixed).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::balance::{assignment_to_batches, memory_constraint_balance, LoadAssignment};
use crate::bridge::{fuse_bridges, insert_bridges, BridgeSpec};
use crate::cluster::{
    generate_virtual_devices, order_devices_by_memory, validate_cluster, Cluster,
    DeviceSpec, VirtualDevice, VirtualLayout,
};
use crate::error::{PlanError, Result};
use crate::model_ir::{CompGraph, PlanConfig, StrategyKind};
use crate::sharding::{apply_split, PatternTable, ShardedTaskGraph};
use crate::taskgraph::{
    auto_partition, partition_by_annotation, profile_taskgraph, TaskGraph,
    TaskGraphProfile,
};

// ── Types ────────────────────────────────────────────────────────────────

/// Knobs for plan construction.
#[derive(Debug, Clone)]
pub struct PlanOptions {
    /// Collapse gather + same-dimension re-partition bridges.
    pub fuse_bridges: bool,
    /// Sharding patterns to match Split TaskGraphs against.
    pub pattern_table: PatternTable,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            fuse_bridges: true,
            pattern_table: PatternTable::builtin(),
        }
    }
}

/// One TaskGraph, fully resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub index: usize,
    pub op_ids: Vec<String>,
    pub strategy: crate::taskgraph::Strategy,
    pub profile: TaskGraphProfile,
    /// Per-device load share within the stage (length = stage degree).
    pub load_ratios: Vec<f64>,
    /// Replica-major per-device batch sizes; data-parallel stages only
    /// (a Split stage processes the replica's whole batch on every
    /// device).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub device_batches: Vec<Vec<u64>>,
    /// Distributed rewrite of a Split stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharded: Option<ShardedTaskGraph>,
    /// Stage peak: `param·(1+opt_mult) + activation_per_micro·cached`.
    pub peak_mem_bytes: u64,
}

/// Membership of one gradient-sync AllReduce group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncScope {
    /// Devices of one data-parallel stage within one replica.
    IntraReplica { replica: usize },
    /// The same device slot of one stage across all replicas.
    CrossReplica { slot: usize },
}

/// One gradient AllReduce group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncGroup {
    pub stage: usize,
    pub scope: SyncScope,
    pub devices: Vec<String>,
    /// Gradient bytes synchronized by this group.
    pub bytes: u64,
}

/// A complete, self-contained execution plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionPlan {
    pub config: PlanConfig,
    pub cluster: Cluster,
    pub layout: VirtualLayout,
    pub stages: Vec<StagePlan>,
    pub bridges: Vec<BridgeSpec>,
    /// Global batch split across nested data-parallel replicas.
    pub replica_batches: Vec<u64>,
    pub sync_groups: Vec<SyncGroup>,
    /// Gradient bytes one replica synchronizes per step.
    pub gradient_sync_bytes_per_replica: u64,
    pub warnings: Vec<String>,
}

impl ExecutionPlan {
    /// Total bridge communication bytes under the current fusion state.
    pub fn bridge_bytes(&self) -> u64 {
        self.bridges.iter().map(|b| b.simulated_bytes()).sum()
    }

    /// Stage count.
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

/// Versioned on-disk wrapper for [`ExecutionPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub version: u32,
    pub plan: ExecutionPlan,
}

/// Current plan document schema version.
pub const PLAN_VERSION: u32 = 1;

impl PlanDocument {
    pub fn new(plan: ExecutionPlan) -> PlanDocument {
        PlanDocument {
            version: PLAN_VERSION,
            plan,
        }
    }

    /// Serialize with a stable layout (pretty, ordered maps).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan documents always serialize")
    }

    pub fn from_json(text: &str) -> Result<PlanDocument> {
        let doc: PlanDocument = serde_json::from_str(text)
            .map_err(|e| PlanError::Schema(format!("plan document: {e}")))?;
        if doc.version != PLAN_VERSION {
            return Err(PlanError::Schema(format!(
                "unsupported plan version {} (expected {PLAN_VERSION})",
                doc.version
            )));
        }
        Ok(doc)
    }
}

// ── Plan construction ────────────────────────────────────────────────────

/// Build the complete execution plan for a model on a cluster.
pub fn build_plan(
    graph: &CompGraph,
    cluster: &Cluster,
    options: &PlanOptions,
) -> Result<ExecutionPlan> {
    validate_cluster(cluster)?;
    let config = &graph.config;
    if config.global_batch % config.num_micro_batch != 0 {
        return Err(PlanError::Schema(format!(
            "global_batch {} is not divisible by num_micro_batch {}",
            config.global_batch, config.num_micro_batch
        )));
    }
    let mut warnings = Vec::new();

    // Partition and place.
    let (taskgraphs, layout) = partition_and_place(graph, cluster)?;
    let n_stages = taskgraphs.len();
    if !layout.idle.is_empty() {
        warnings.push(format!(
            "{} device(s) idle after forming {} replica(s): {}",
            layout.idle.len(),
            layout.degree,
            layout.idle.join(", ")
        ));
    }

    // Profile each stage; stage s of N caches N − s micro-batches.
    let mut profiles = Vec::with_capacity(n_stages);
    for (s, tg) in taskgraphs.iter().enumerate() {
        profiles.push(profile_taskgraph(graph, tg, (n_stages - s) as u64)?);
    }

    // Per-stage load ratios and Split rewrites.
    let mut stage_ratios = Vec::with_capacity(n_stages);
    let mut sharded_map: BTreeMap<usize, ShardedTaskGraph> = BTreeMap::new();
    for (tg, profile) in taskgraphs.iter().zip(&profiles) {
        let specs = stage_devices(&layout, cluster, 0, tg.index);
        let ratios = if tg.strategy.device_count >= 2 {
            memory_constraint_balance(&specs, profile.tg_mem, profile.tg_flop)?.ratios
        } else {
            vec![1.0]
        };
        if tg.strategy.kind == StrategyKind::Split {
            let assignment = LoadAssignment {
                ratios: ratios.clone(),
            };
            sharded_map.insert(
                tg.index,
                apply_split(graph, &options.pattern_table, tg, Some(&assignment))?,
            );
        }
        stage_ratios.push(ratios);
    }

    // Bridges.
    let mut bridges = insert_bridges(graph, &taskgraphs, &sharded_map)?;
    if options.fuse_bridges {
        fuse_bridges(&mut bridges);
    }

    // Cross-replica batch split: each replica is one meta-device whose
    // capability aggregates its physical devices.
    let replica_batches = if layout.degree >= 2 {
        let metas: Vec<DeviceSpec> = (0..layout.degree)
            .map(|r| replica_meta_device(&layout, cluster, r, n_stages))
            .collect();
        let total_mem: u64 = profiles.iter().map(|p| p.tg_mem).sum();
        let total_flop: u64 = profiles.iter().map(|p| p.tg_flop).sum();
        let assignment = memory_constraint_balance(&metas, total_mem, total_flop)?;
        assignment_to_batches(&assignment, config.global_batch)?
    } else {
        vec![config.global_batch]
    };

    // Per-device batches for data-parallel stages.
    let mut stages = Vec::with_capacity(n_stages);
    for ((tg, profile), ratios) in taskgraphs.iter().zip(profiles).zip(&stage_ratios) {
        let device_batches = match tg.strategy.kind {
            StrategyKind::Replicate if tg.strategy.device_count >= 2 => {
                let assignment = LoadAssignment {
                    ratios: ratios.clone(),
                };
                replica_batches
                    .iter()
                    .map(|&b| assignment_to_batches(&assignment, b))
                    .collect::<Result<Vec<_>>>()?
            }
            StrategyKind::Replicate => {
                replica_batches.iter().map(|&b| vec![b]).collect()
            }
            StrategyKind::Split => Vec::new(),
        };
        let peak_mem_bytes = profile.tg_mem;
        stages.push(StagePlan {
            index: tg.index,
            op_ids: tg.op_ids.clone(),
            strategy: tg.strategy,
            profile,
            load_ratios: ratios.clone(),
            device_batches,
            sharded: sharded_map.get(&tg.index).cloned(),
            peak_mem_bytes,
        });
    }

    let sync_groups = gradient_sync_groups(&stages, &layout);
    let gradient_sync_bytes_per_replica = per_replica_sync_bytes(&sync_groups, &layout);

    Ok(ExecutionPlan {
        config: config.clone(),
        cluster: cluster.clone(),
        layout,
        stages,
        bridges,
        replica_batches,
        sync_groups,
        gradient_sync_bytes_per_replica,
        warnings,
    })
}

/// Rebuild the plan with naive even batch allocation — uniform replica
/// shares and uniform per-device batches inside replicated stages —
/// keeping placement, sharding and bridges unchanged. This is the
/// baseline `--compare even` runs against the balanced allocation.
pub fn with_even_batches(plan: &ExecutionPlan) -> Result<ExecutionPlan> {
    let mut out = plan.clone();
    let degree = plan.layout.degree.max(1);
    let uniform = |n: usize| LoadAssignment {
        ratios: vec![1.0 / n as f64; n],
    };
    out.replica_batches = assignment_to_batches(&uniform(degree), plan.config.global_batch)?;
    for stage in &mut out.stages {
        match stage.strategy.kind {
            StrategyKind::Replicate if stage.strategy.device_count >= 2 => {
                stage.device_batches = out
                    .replica_batches
                    .iter()
                    .map(|&b| assignment_to_batches(&uniform(stage.strategy.device_count), b))
                    .collect::<Result<Vec<_>>>()?;
            }
            StrategyKind::Replicate => {
                stage.device_batches = out.replica_batches.iter().map(|&b| vec![b]).collect();
            }
            StrategyKind::Split => {}
        }
    }
    Ok(out)
}

/// Partition the graph and lay its TaskGraphs out on the cluster.
fn partition_and_place(
    graph: &CompGraph,
    cluster: &Cluster,
) -> Result<(Vec<TaskGraph>, VirtualLayout)> {
    if graph.config.auto_parallel {
        let n = graph.config.num_task_graph.ok_or_else(|| {
            PlanError::Schema("auto_parallel requires num_task_graph".to_string())
        })?;
        let counts = vec![1usize; n];
        let mut layout = generate_virtual_devices(cluster, &counts)?;
        reorder_layout_by_memory(&mut layout, cluster, &counts);
        let stage_devices: Vec<DeviceSpec> = (0..n)
            .map(|s| cluster.device(&layout.vd(0, s).devices[0]).clone())
            .collect();
        let tgs = auto_partition(graph, n, &stage_devices)?;
        Ok((tgs, layout))
    } else {
        let tgs = partition_by_annotation(graph);
        let counts: Vec<usize> = tgs.iter().map(|t| t.strategy.device_count).collect();
        let total: usize = counts.iter().sum();
        let k = cluster.len();
        // Every TaskGraph requesting the whole cluster is the hybrid
        // overlay (e.g. a replicated backbone with a split head): all
        // stages share all devices, one replica.
        let layout = if tgs.len() >= 2 && total > k && counts.iter().all(|&c| c == k) {
            overlay_layout(cluster, tgs.len())
        } else {
            let mut layout = generate_virtual_devices(cluster, &counts)?;
            if tgs.len() >= 2 {
                reorder_layout_by_memory(&mut layout, cluster, &counts);
            }
            layout
        };
        Ok((tgs, layout))
    }
}

/// Every TaskGraph spans the whole cluster; a single replica.
fn overlay_layout(cluster: &Cluster, n_stages: usize) -> VirtualLayout {
    let all: Vec<String> = cluster.devices.iter().map(|d| d.id.clone()).collect();
    VirtualLayout {
        virtual_devices: (0..n_stages)
            .map(|s| VirtualDevice {
                taskgraph_index: s,
                replica_index: 0,
                devices: all.clone(),
            })
            .collect(),
        degree: 1,
        idle: Vec::new(),
    }
}

/// Reorder each replica's devices by memory, highest first, and deal them
/// back to stages in order — earlier stages cache more activations and
/// receive the larger devices.
fn reorder_layout_by_memory(layout: &mut VirtualLayout, cluster: &Cluster, counts: &[usize]) {
    for replica in 0..layout.degree {
        let flat: Vec<String> = (0..counts.len())
            .flat_map(|s| layout.vd(replica, s).devices.clone())
            .collect();
        let sorted = order_devices_by_memory(&flat, cluster);
        let mut next = sorted.into_iter();
        let per_replica = counts.len();
        for (s, &count) in counts.iter().enumerate() {
            let vd = &mut layout.virtual_devices[replica * per_replica + s];
            vd.devices = next.by_ref().take(count).collect();
        }
    }
}

/// The device specs serving one stage of one replica.
fn stage_devices(
    layout: &VirtualLayout,
    cluster: &Cluster,
    replica: usize,
    stage: usize,
) -> Vec<DeviceSpec> {
    layout
        .vd(replica, stage)
        .devices
        .iter()
        .map(|id| cluster.device(id).clone())
        .collect()
}

/// Aggregate one replica's devices into a single meta-device for the
/// cross-replica batch split.
fn replica_meta_device(
    layout: &VirtualLayout,
    cluster: &Cluster,
    replica: usize,
    n_stages: usize,
) -> DeviceSpec {
    let mut flops = 0.0;
    let mut mem = 0u64;
    for s in 0..n_stages {
        for id in &layout.vd(replica, s).devices {
            let d = cluster.device(id);
            flops += d.flops_per_sec;
            mem += d.mem_bytes;
        }
    }
    DeviceSpec {
        id: format!("replica-{replica}"),
        flops_per_sec: flops,
        mem_bytes: mem,
        node_id: String::new(),
        intra_node_bw: 0.0,
        inter_node_bw: 0.0,
    }
}

/// Gradient AllReduce groups: per-replica for data-parallel stages, then
/// per device slot across replicas under nested data parallelism.
fn gradient_sync_groups(stages: &[StagePlan], layout: &VirtualLayout) -> Vec<SyncGroup> {
    let mut groups = Vec::new();
    for stage in stages {
        if stage.profile.param_bytes == 0 {
            continue;
        }
        if stage.strategy.kind == StrategyKind::Replicate && stage.strategy.device_count >= 2
        {
            for replica in 0..layout.degree {
                groups.push(SyncGroup {
                    stage: stage.index,
                    scope: SyncScope::IntraReplica { replica },
                    devices: layout.vd(replica, stage.index).devices.clone(),
                    bytes: stage.profile.param_bytes,
                });
            }
        }
        if layout.degree >= 2 {
            for slot in 0..stage.strategy.device_count {
                let devices: Vec<String> = (0..layout.degree)
                    .map(|r| layout.vd(r, stage.index).devices[slot].clone())
                    .collect();
                let bytes = match stage.strategy.kind {
                    // Each device holds the full replicated parameters.
                    StrategyKind::Replicate => stage.profile.param_bytes,
                    // Each slot holds its proportional parameter shard.
                    StrategyKind::Split => {
                        (stage.profile.param_bytes as f64 * stage.load_ratios[slot])
                            .round() as u64
                    }
                };
                if bytes > 0 {
                    groups.push(SyncGroup {
                        stage: stage.index,
                        scope: SyncScope::CrossReplica { slot },
                        devices,
                        bytes,
                    });
                }
            }
        }
    }
    groups
}

/// Gradient bytes one replica synchronizes per step: its own intra-stage
/// groups plus every cross-replica slot it participates in.
fn per_replica_sync_bytes(groups: &[SyncGroup], _layout: &VirtualLayout) -> u64 {
    groups
        .iter()
        .filter(|g| match g.scope {
            SyncScope::IntraReplica { replica } => replica == 0,
            SyncScope::CrossReplica { .. } => true,
        })
        .map(|g| g.bytes)
        .sum()
}

// ── Tests ────────────────────────────────────────────────────────────────
