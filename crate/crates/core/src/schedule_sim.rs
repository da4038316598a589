//! Backward-first pipeline scheduling and deterministic discrete-event
//! simulation.
//!
//! [`build_pipeline_schedule`] lays a plan's forward/backward micro-batch
//! tasks, bridge transfers, collectives, gradient synchronization and
//! optimizer applies onto per-device timelines; [`simulate`] reduces the
//! timeline to metrics. Scheduling is earliest-start greedy under a
//! 1F1B-style discipline:
//!
//! - stage `s` of `N` admits at most `N − s` in-flight forward
//!   micro-batches (matching its activation cache depth);
//! - when several tasks could start at the same instant, backwards win
//!   over forwards, then lower micro-batch, stage, and replica — fully
//!   deterministic;
//! - each device has a *compute* lane and a *comm* lane that may overlap
//!   only when no data dependency orders them.
//!
//! The cost model is declared, not measured: compute time is
//! `flop_share / DF_device`; ring collectives over `n` devices move
//! `2·(n−1)/n · bytes` (AllReduce) or `(n−1)/n · bytes` (AllGather) at the
//! slowest bandwidth class in the group plus `(n−1)` fixed hop latencies;
//! a bridge moves its fused or unfused byte volume point-to-point.
//! Sharding collectives and bridges are charged on the forward pass only.
//! Per-stage peak memory is `param·(1+opt) + act_per_micro·cached`; a
//! device whose resident share exceeds its capacity is reported as a plan
//! defect, not a crash.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::DeviceSpec;
use crate::model_ir::StrategyKind;
use crate::plan::{ExecutionPlan, StagePlan, SyncScope};
use crate::sharding::CommKind;

/// Default per-hop latency added to every collective step (seconds).
pub const DEFAULT_HOP_LATENCY_S: f64 = 10e-6;

// ── Types ────────────────────────────────────────────────────────────────

/// Tunable simulation parameters.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Fixed latency charged per ring hop / transfer (seconds).
    pub hop_latency_s: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            hop_latency_s: DEFAULT_HOP_LATENCY_S,
        }
    }
}

/// What one timeline event does.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Forward { stage: usize, micro: u64 },
    Backward { stage: usize, micro: u64 },
    Apply { stage: usize },
    Comm { id: String },
    BridgeXfer { id: String },
}

impl EventKind {
    /// Display name used in reports and traces.
    pub fn label(&self) -> String {
        match self {
            EventKind::Forward { stage, micro } => format!("F[s{stage},m{micro}]"),
            EventKind::Backward { stage, micro } => format!("B[s{stage},m{micro}]"),
            EventKind::Apply { stage } => format!("Apply[s{stage}]"),
            EventKind::Comm { id } => id.clone(),
            EventKind::BridgeXfer { id } => id.clone(),
        }
    }

    /// Forward or backward compute.
    pub fn is_compute(&self) -> bool {
        matches!(
            self,
            EventKind::Forward { .. } | EventKind::Backward { .. }
        )
    }
}

/// One placed interval on one device's timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub device_id: String,
    pub replica: usize,
    pub kind: EventKind,
    /// Seconds from step start.
    pub start: f64,
    /// Seconds.
    pub duration: f64,
}

impl ScheduleEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Busy/idle accounting for one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    /// Union length of the device's busy intervals (seconds).
    pub busy_time: f64,
    pub idle_fraction: f64,
    pub utilization: f64,
}

/// Simulation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    /// Makespan of one training step (seconds).
    pub step_time: f64,
    /// Samples per second: `global_batch / step_time`.
    pub throughput: f64,
    pub per_device: BTreeMap<String, DeviceMetrics>,
    /// Peak bytes per stage: `param·(1+opt) + act_per_micro·cached`.
    pub per_stage_peak_mem: Vec<u64>,
    /// Logical bytes moved by bridges, sharding collectives and gradient
    /// sync (batch-share scaled, counted once per collective).
    pub total_comm_bytes: u64,
    /// Gradient bytes one replica synchronizes per step.
    pub gradient_sync_bytes_per_replica: u64,
    /// Devices whose resident memory share exceeds capacity.
    pub oom_defects: Vec<String>,
}

impl SimMetrics {
    /// True when the plan over-commits some device's memory.
    pub fn has_oom(&self) -> bool {
        !self.oom_defects.is_empty()
    }
}

// ── Collective timing ────────────────────────────────────────────────────

/// Slowest applicable bandwidth in a device group: the intra-node class
/// unless the group spans nodes.
fn group_bandwidth(group: &[&DeviceSpec]) -> f64 {
    let spans_nodes = group
        .windows(2)
        .any(|pair| pair[0].node_id != pair[1].node_id);
    group
        .iter()
        .map(|d| if spans_nodes { d.inter_node_bw } else { d.intra_node_bw })
        .fold(f64::INFINITY, f64::min)
}

fn ring_time(ratio: f64, bytes: f64, group: &[&DeviceSpec], hop_latency_s: f64) -> f64 {
    let n = group.len();
    if n <= 1 || bytes <= 0.0 {
        return 0.0;
    }
    ratio * bytes / group_bandwidth(group) + (n - 1) as f64 * hop_latency_s
}

/// Ring AllReduce: `(2·(n−1)/n · bytes) / bw_min + (n−1)·latency`.
pub fn allreduce_time(bytes: u64, group: &[&DeviceSpec], hop_latency_s: f64) -> f64 {
    let n = group.len() as f64;
    if group.len() <= 1 {
        return 0.0;
    }
    ring_time(2.0 * (n - 1.0) / n, bytes as f64, group, hop_latency_s)
}

/// Ring AllGather: `((n−1)/n · bytes) / bw_min + (n−1)·latency`.
pub fn allgather_time(bytes: u64, group: &[&DeviceSpec], hop_latency_s: f64) -> f64 {
    let n = group.len() as f64;
    if group.len() <= 1 {
        return 0.0;
    }
    ring_time((n - 1.0) / n, bytes as f64, group, hop_latency_s)
}

/// Point-to-point transfer: `bytes / bw_min + latency`.
fn transfer_time(bytes: f64, group: &[&DeviceSpec], hop_latency_s: f64) -> f64 {
    if bytes <= 0.0 {
        return 0.0;
    }
    bytes / group_bandwidth(group) + hop_latency_s
}

// ── Memory accounting ────────────────────────────────────────────────────

/// Per-stage peak bytes plus per-device over-commit defects. A device
/// hosting several stages (whole-cluster overlay) accumulates every
/// resident share.
pub fn peak_memory(plan: &ExecutionPlan) -> (Vec<u64>, Vec<String>) {
    let peaks: Vec<u64> = plan.stages.iter().map(|s| s.peak_mem_bytes).collect();
    let mut resident: BTreeMap<&str, f64> = BTreeMap::new();
    for stage in &plan.stages {
        for replica in 0..plan.layout.degree {
            let vd = plan.layout.vd(replica, stage.index);
            for (slot, id) in vd.devices.iter().enumerate() {
                *resident.entry(id.as_str()).or_default() +=
                    stage.peak_mem_bytes as f64 * stage.load_ratios[slot];
            }
        }
    }
    let mut defects = Vec::new();
    for (id, bytes) in &resident {
        let capacity = plan.cluster.device(id).mem_bytes as f64;
        if *bytes > capacity {
            defects.push(format!(
                "device `{id}` needs {:.0} bytes but offers {:.0}",
                bytes, capacity
            ));
        }
    }
    (peaks, defects)
}

// ── Schedule construction ────────────────────────────────────────────────

/// Per-device pair of lane cursors (next free instant).
#[derive(Debug, Default, Clone)]
struct Lanes {
    compute: BTreeMap<String, f64>,
    comm: BTreeMap<String, f64>,
}

impl Lanes {
    fn compute_free(&self, device: &str) -> f64 {
        self.compute.get(device).copied().unwrap_or(0.0)
    }
    fn comm_free(&self, device: &str) -> f64 {
        self.comm.get(device).copied().unwrap_or(0.0)
    }
}

/// The full scheduling state while placing one plan.
struct Scheduler<'p> {
    plan: &'p ExecutionPlan,
    options: SimOptions,
    lanes: Lanes,
    events: Vec<ScheduleEvent>,
    /// Logical bytes moved, counted once per collective.
    comm_bytes: f64,
}

/// Identity of one compute task in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Task {
    replica: usize,
    stage: usize,
    micro: u64,
    backward: bool,
}

impl Task {
    /// Backward-first tie-break key: kind, micro, stage, replica.
    fn priority(&self) -> (u8, u64, usize, usize) {
        (
            u8::from(!self.backward),
            self.micro,
            self.stage,
            self.replica,
        )
    }
}

impl<'p> Scheduler<'p> {
    fn new(plan: &'p ExecutionPlan, options: SimOptions) -> Self {
        Scheduler {
            plan,
            options,
            lanes: Lanes::default(),
            events: Vec::new(),
            comm_bytes: 0.0,
        }
    }

    fn stage(&self, s: usize) -> &StagePlan {
        &self.plan.stages[s]
    }

    fn devices(&self, replica: usize, stage: usize) -> Vec<&'p DeviceSpec> {
        self.plan
            .layout
            .vd(replica, stage)
            .devices
            .iter()
            .map(|id| self.plan.cluster.device(id))
            .collect()
    }

    /// Fraction of the stage's profiled (global micro-batch) flop that
    /// device `slot` executes for `replica`.
    fn flop_fraction(&self, stage: usize, replica: usize, slot: usize) -> f64 {
        let sp = self.stage(stage);
        let gb = self.plan.config.global_batch as f64;
        match sp.strategy.kind {
            StrategyKind::Replicate => sp.device_batches[replica][slot] as f64 / gb,
            StrategyKind::Split => {
                self.plan.replica_batches[replica] as f64 / gb * sp.load_ratios[slot]
            }
        }
    }

    /// Batch-share scale for byte volumes of `replica`.
    fn batch_scale(&self, replica: usize) -> f64 {
        self.plan.replica_batches[replica] as f64 / self.plan.config.global_batch as f64
    }

    /// Book one collective across a device group's comm lanes; returns
    /// its completion time.
    fn book_group_comm(
        &mut self,
        replica: usize,
        devices: &[&DeviceSpec],
        ready: f64,
        duration: f64,
        kind: EventKind,
        logical_bytes: f64,
    ) -> f64 {
        let start = devices
            .iter()
            .map(|d| self.lanes.comm_free(&d.id))
            .fold(ready, f64::max);
        let end = start + duration;
        for d in devices {
            self.lanes.comm.insert(d.id.clone(), end);
            self.events.push(ScheduleEvent {
                device_id: d.id.clone(),
                replica,
                kind: kind.clone(),
                start,
                duration,
            });
        }
        self.comm_bytes += logical_bytes;
        end
    }

    /// Earliest instant the task's compute could start, without placing
    /// anything. `ready` is its dependency time (bridges included).
    fn feasible_start(&self, task: Task, ready: f64) -> f64 {
        self.devices(task.replica, task.stage)
            .iter()
            .map(|d| self.lanes.compute_free(&d.id))
            .fold(ready, f64::max)
    }

    /// Place the task's per-device compute events; returns (start, end).
    fn place_compute(&mut self, task: Task, ready: f64) -> (f64, f64) {
        let start = self.feasible_start(task, ready);
        let devices = self.devices(task.replica, task.stage);
        let sp = self.stage(task.stage);
        let flop = if task.backward {
            sp.profile.backward_flop
        } else {
            sp.profile.forward_flop
        };
        let kind = if task.backward {
            EventKind::Backward {
                stage: task.stage,
                micro: task.micro,
            }
        } else {
            EventKind::Forward {
                stage: task.stage,
                micro: task.micro,
            }
        };
        let mut end = start;
        for (slot, d) in devices.iter().enumerate() {
            let duration =
                flop as f64 * self.flop_fraction(task.stage, task.replica, slot)
                    / d.flops_per_sec;
            self.lanes.compute.insert(d.id.clone(), start + duration);
            self.events.push(ScheduleEvent {
                device_id: d.id.clone(),
                replica: task.replica,
                kind: kind.clone(),
                start,
                duration,
            });
            end = end.max(start + duration);
        }
        (start, end)
    }

    /// Book the sharding collectives a Split stage's forward incurs
    /// after its compute; returns the new completion time.
    fn book_forward_collectives(&mut self, task: Task, compute_end: f64) -> f64 {
        let sp = self.stage(task.stage);
        let Some(sharded) = &sp.sharded else {
            return compute_end;
        };
        let devices = self.devices(task.replica, task.stage);
        let scale = self.batch_scale(task.replica);
        let mut done = compute_end;
        let collectives: Vec<_> = sharded
            .ops
            .iter()
            .flat_map(|op| op.collectives.iter().cloned())
            .collect();
        for c in collectives {
            let bytes = if c.batch_scaled {
                c.bytes as f64 * scale
            } else {
                c.bytes as f64
            };
            let (duration, name) = match c.kind {
                CommKind::AllReduce => (
                    ring_time(
                        2.0 * (devices.len() as f64 - 1.0) / devices.len() as f64,
                        bytes,
                        &devices,
                        self.options.hop_latency_s,
                    ),
                    "allreduce",
                ),
                CommKind::AllGather => (
                    ring_time(
                        (devices.len() as f64 - 1.0) / devices.len() as f64,
                        bytes,
                        &devices,
                        self.options.hop_latency_s,
                    ),
                    "allgather",
                ),
                CommKind::None => continue,
            };
            if duration <= 0.0 {
                continue;
            }
            let kind = EventKind::Comm {
                id: format!("{name}:{}:m{}", c.tensor, task.micro),
            };
            done = self.book_group_comm(task.replica, &devices, done, duration, kind, bytes);
        }
        done
    }

    /// Book the bridge transfers feeding stage `s` for one micro-batch;
    /// returns when the last one lands.
    fn book_bridges_into(&mut self, replica: usize, stage: usize, micro: u64, ready: f64) -> f64 {
        let mut done = ready;
        let bridges: Vec<_> = self
            .plan
            .bridges
            .iter()
            .filter(|b| b.consumer_tg == stage)
            .cloned()
            .collect();
        for b in bridges {
            let mut group = self.devices(replica, b.producer_tg);
            for d in self.devices(replica, b.consumer_tg) {
                if !group.iter().any(|g| g.id == d.id) {
                    group.push(d);
                }
            }
            let scale = if b.batch_scaled {
                self.batch_scale(replica)
            } else {
                1.0
            };
            let bytes = b.simulated_bytes() as f64 * scale;
            let duration = transfer_time(bytes, &group, self.options.hop_latency_s);
            if duration <= 0.0 {
                continue;
            }
            let kind = EventKind::BridgeXfer {
                id: format!(
                    "bridge:{}:tg{}-tg{}:m{}",
                    b.tensor, b.producer_tg, b.consumer_tg, micro
                ),
            };
            let end = self.book_group_comm(replica, &group, ready, duration, kind, bytes);
            done = done.max(end);
        }
        done
    }

    /// Gradient sync (hierarchical AllReduce) and optimizer apply, after
    /// every backward has completed.
    fn book_sync_and_apply(&mut self, backward_done: &BTreeMap<(usize, usize), f64>) {
        let degree = self.plan.layout.degree;
        // Intra-replica stage AllReduce.
        let mut intra_done: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for group in &self.plan.sync_groups {
            let SyncScope::IntraReplica { replica } = group.scope else {
                continue;
            };
            let devices: Vec<&DeviceSpec> = group
                .devices
                .iter()
                .map(|id| self.plan.cluster.device(id))
                .collect();
            let ready = backward_done[&(replica, group.stage)];
            let duration =
                allreduce_time(group.bytes, &devices, self.options.hop_latency_s);
            let kind = EventKind::Comm {
                id: format!("grad-allreduce:s{}:r{replica}", group.stage),
            };
            let end = self.book_group_comm(
                replica,
                &devices,
                ready,
                duration,
                kind,
                group.bytes as f64,
            );
            intra_done.insert((replica, group.stage), end);
        }
        // Cross-replica per-slot AllReduce: ready once every replica
        // finished the stage (and its intra sync, when present).
        let mut cross_done: BTreeMap<usize, f64> = BTreeMap::new();
        for group in &self.plan.sync_groups {
            let SyncScope::CrossReplica { slot } = group.scope else {
                continue;
            };
            let devices: Vec<&DeviceSpec> = group
                .devices
                .iter()
                .map(|id| self.plan.cluster.device(id))
                .collect();
            let ready = (0..degree)
                .map(|r| {
                    intra_done
                        .get(&(r, group.stage))
                        .copied()
                        .unwrap_or_else(|| backward_done[&(r, group.stage)])
                })
                .fold(0.0, f64::max);
            let duration =
                allreduce_time(group.bytes, &devices, self.options.hop_latency_s);
            let kind = EventKind::Comm {
                id: format!("grad-allreduce:s{}:slot{slot}", group.stage),
            };
            let end = self.book_group_comm(
                0,
                &devices,
                ready,
                duration,
                kind,
                group.bytes as f64,
            );
            let entry = cross_done.entry(group.stage).or_insert(0.0);
            *entry = entry.max(end);
        }
        // Optimizer apply per device.
        for stage in &self.plan.stages {
            if stage.profile.apply_flop == 0 {
                continue;
            }
            for replica in 0..degree {
                let ready = intra_done
                    .get(&(replica, stage.index))
                    .copied()
                    .unwrap_or_else(|| backward_done[&(replica, stage.index)])
                    .max(cross_done.get(&stage.index).copied().unwrap_or(0.0));
                let devices = self.devices(replica, stage.index);
                for (slot, d) in devices.iter().enumerate() {
                    let share = match stage.strategy.kind {
                        StrategyKind::Replicate => 1.0,
                        StrategyKind::Split => stage.load_ratios[slot],
                    };
                    let duration = stage.profile.apply_flop as f64 * share / d.flops_per_sec;
                    if duration <= 0.0 {
                        continue;
                    }
                    let start = ready.max(self.lanes.compute_free(&d.id));
                    self.lanes.compute.insert(d.id.clone(), start + duration);
                    self.events.push(ScheduleEvent {
                        device_id: d.id.clone(),
                        replica,
                        kind: EventKind::Apply { stage: stage.index },
                        start,
                        duration,
                    });
                }
            }
        }
    }

    /// Run the 1F1B pipeline for every replica.
    fn run(mut self) -> (Vec<ScheduleEvent>, f64) {
        let n = self.plan.stages.len();
        let degree = self.plan.layout.degree;
        let micros = self.plan.config.num_micro_batch;

        let mut fwd_done: BTreeMap<(usize, usize, u64), f64> = BTreeMap::new();
        let mut bwd_done: BTreeMap<(usize, usize, u64), f64> = BTreeMap::new();
        let mut next_fwd: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut next_bwd: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut bwd_finished: BTreeMap<(usize, usize), u64> = BTreeMap::new();

        let total_tasks = 2 * n as u64 * micros * degree as u64;
        let mut placed = 0u64;
        while placed < total_tasks {
            // Collect ready tasks: the next forward/backward micro of
            // each stage whose dependencies completed.
            let mut best: Option<(f64, (u8, u64, usize, usize), Task, f64)> = None;
            for replica in 0..degree {
                for stage in 0..n {
                    let nf = *next_fwd.get(&(replica, stage)).unwrap_or(&0);
                    if nf < micros {
                        let dep = if stage == 0 {
                            Some(0.0)
                        } else {
                            fwd_done.get(&(replica, stage - 1, nf)).copied()
                        };
                        let in_flight =
                            nf - bwd_finished.get(&(replica, stage)).copied().unwrap_or(0);
                        if let Some(dep) = dep {
                            if (in_flight as usize) < n - stage {
                                let task = Task {
                                    replica,
                                    stage,
                                    micro: nf,
                                    backward: false,
                                };
                                let feasible = self.feasible_start(task, dep);
                                let key = (feasible, task.priority(), task, dep);
                                if best
                                    .as_ref()
                                    .map_or(true, |b| (key.0, key.1) < (b.0, b.1))
                                {
                                    best = Some(key);
                                }
                            }
                        }
                    }
                    let nb = *next_bwd.get(&(replica, stage)).unwrap_or(&0);
                    if nb < micros {
                        let own = fwd_done.get(&(replica, stage, nb)).copied();
                        let downstream = if stage + 1 == n {
                            own
                        } else {
                            bwd_done.get(&(replica, stage + 1, nb)).copied()
                        };
                        if let (Some(own), Some(downstream)) = (own, downstream) {
                            let dep = own.max(downstream);
                            let task = Task {
                                replica,
                                stage,
                                micro: nb,
                                backward: true,
                            };
                            let feasible = self.feasible_start(task, dep);
                            let key = (feasible, task.priority(), task, dep);
                            if best
                                .as_ref()
                                .map_or(true, |b| (key.0, key.1) < (b.0, b.1))
                            {
                                best = Some(key);
                            }
                        }
                    }
                }
            }
            let (_, _, task, dep) = best.expect("pipeline deadlock: no ready task");
            if task.backward {
                let (_, end) = self.place_compute(task, dep);
                bwd_done.insert((task.replica, task.stage, task.micro), end);
                next_bwd.insert((task.replica, task.stage), task.micro + 1);
                *bwd_finished.entry((task.replica, task.stage)).or_insert(0) += 1;
            } else {
                // Bridges feeding this stage run before its compute.
                let ready = if task.stage > 0 {
                    self.book_bridges_into(task.replica, task.stage, task.micro, dep)
                } else {
                    dep
                };
                let (_, compute_end) = self.place_compute(task, ready);
                let end = self.book_forward_collectives(task, compute_end);
                fwd_done.insert((task.replica, task.stage, task.micro), end);
                next_fwd.insert((task.replica, task.stage), task.micro + 1);
            }
            placed += 1;
        }

        // Stage-level backward completion for gradient sync.
        let mut backward_all: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for ((replica, stage, _), &t) in &bwd_done {
            let entry = backward_all.entry((*replica, *stage)).or_insert(0.0);
            *entry = entry.max(t);
        }
        self.book_sync_and_apply(&backward_all);

        let comm_bytes = self.comm_bytes;
        (self.events, comm_bytes)
    }
}

/// Lay out every event of one training step.
pub fn build_pipeline_schedule(plan: &ExecutionPlan) -> Vec<ScheduleEvent> {
    build_pipeline_schedule_with(plan, SimOptions::default())
}

/// As [`build_pipeline_schedule`], with explicit parameters.
pub fn build_pipeline_schedule_with(plan: &ExecutionPlan, options: SimOptions) -> Vec<ScheduleEvent> {
    Scheduler::new(plan, options).run().0
}

// ── Simulation ───────────────────────────────────────────────────────────

/// Simulate one training step of the plan under default parameters.
pub fn simulate(plan: &ExecutionPlan) -> SimMetrics {
    simulate_with(plan, SimOptions::default())
}

/// Simulate one training step with explicit parameters.
pub fn simulate_with(plan: &ExecutionPlan, options: SimOptions) -> SimMetrics {
    let (events, comm_bytes) = Scheduler::new(plan, options).run();
    let step_time = events.iter().map(ScheduleEvent::end).fold(0.0, f64::max);

    // Busy time = union of each device's event intervals.
    let mut intervals: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for d in &plan.cluster.devices {
        intervals.entry(d.id.as_str()).or_default();
    }
    for e in &events {
        intervals
            .entry(e.device_id.as_str())
            .or_default()
            .push((e.start, e.end()));
    }
    let mut per_device = BTreeMap::new();
    for (id, mut spans) in intervals {
        spans.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let mut busy = 0.0;
        let mut cursor = f64::NEG_INFINITY;
        for (start, end) in spans {
            let start = start.max(cursor);
            if end > start {
                busy += end - start;
                cursor = end;
            } else {
                cursor = cursor.max(end);
            }
        }
        let utilization = if step_time > 0.0 { busy / step_time } else { 0.0 };
        per_device.insert(
            id.to_string(),
            DeviceMetrics {
                busy_time: busy,
                idle_fraction: 1.0 - utilization,
                utilization,
            },
        );
    }

    let (per_stage_peak_mem, oom_defects) = peak_memory(plan);
    let throughput = if step_time > 0.0 {
        plan.config.global_batch as f64 / step_time
    } else {
        0.0
    };
    SimMetrics {
        step_time,
        throughput,
        per_device,
        per_stage_peak_mem,
        total_comm_bytes: comm_bytes.round() as u64,
        gradient_sync_bytes_per_replica: plan.gradient_sync_bytes_per_replica,
        oom_defects,
    }
}

/// Simulate many independent plans, in parallel when the `parallel`
/// feature is enabled.
#[cfg(feature = "parallel")]
pub fn simulate_many(plans: &[ExecutionPlan]) -> Vec<SimMetrics> {
    use rayon::prelude::*;
    plans.par_iter().map(simulate).collect()
}

/// Simulate many independent plans sequentially.
#[cfg(not(feature = "parallel"))]
pub fn simulate_many(plans: &[ExecutionPlan]) -> Vec<SimMetrics> {
    plans.iter().map(simulate).collect()
}

// ── Tests ────────────────────────────────────────────────────────────────
