//! Plain-text reports for plans and simulations.
//!
//! Rendering lives in the library so the command-line front end, tests
//! and any embedding tool produce byte-identical output for identical
//! inputs. Numbers print with fixed precision; byte counts print as raw
//! integers to stay exact.

use std::fmt::Write as _;

use crate::plan::{ExecutionPlan, SyncScope};
use crate::schedule_sim::SimMetrics;

fn ratio_list(ratios: &[f64]) -> String {
    let parts: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Human-readable summary of an execution plan.
pub fn plan_report(plan: &ExecutionPlan) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Execution plan: {} stage(s), nested degree {}",
        plan.stages.len(),
        plan.layout.degree
    );
    let batches: Vec<String> = plan.replica_batches.iter().map(u64::to_string).collect();
    let _ = writeln!(
        out,
        "  global batch {}, micro-batches {}, replica batches [{}]",
        plan.config.global_batch,
        plan.config.num_micro_batch,
        batches.join(", ")
    );
    for stage in &plan.stages {
        let devices = &plan.layout.vd(0, stage.index).devices;
        let _ = writeln!(
            out,
            "  stage {}: {:?}({}) on [{}]",
            stage.index,
            stage.strategy.kind,
            stage.strategy.device_count,
            devices.join(", ")
        );
        let _ = writeln!(out, "    ops [{}]", stage.op_ids.join(", "));
        let _ = writeln!(out, "    load ratios {}", ratio_list(&stage.load_ratios));
        let _ = writeln!(
            out,
            "    params {} B, peak memory {} B, cached micro-batches {}",
            stage.profile.param_bytes, stage.peak_mem_bytes, stage.profile.cached_microbatches
        );
        if let Some(sharded) = &stage.sharded {
            for op in &sharded.ops {
                let shards: Vec<String> = op.shard_sizes.iter().map(u64::to_string).collect();
                let _ = writeln!(
                    out,
                    "    op {} via pattern {}, shards [{}], {} collective(s)",
                    op.op_id,
                    op.pattern_id,
                    shards.join(", "),
                    op.collectives.len()
                );
            }
        }
    }
    if plan.bridges.is_empty() {
        let _ = writeln!(out, "  bridges: none");
    } else {
        let _ = writeln!(out, "  bridges:");
        for b in &plan.bridges {
            let _ = writeln!(
                out,
                "    {}: tg{} -> tg{} {:?}, {} B simulated, fused {}",
                b.tensor,
                b.producer_tg,
                b.consumer_tg,
                b.mode,
                b.simulated_bytes(),
                b.fused
            );
        }
    }
    if plan.sync_groups.is_empty() {
        let _ = writeln!(out, "  gradient sync: none");
    } else {
        let _ = writeln!(out, "  gradient sync:");
        for g in &plan.sync_groups {
            let scope = match g.scope {
                SyncScope::IntraReplica { replica } => format!("intra-replica r{replica}"),
                SyncScope::CrossReplica { slot } => format!("cross-replica slot {slot}"),
            };
            let _ = writeln!(
                out,
                "    stage {} {} over {} device(s): {} B",
                g.stage,
                scope,
                g.devices.len(),
                g.bytes
            );
        }
    }
    let _ = writeln!(
        out,
        "  per-replica gradient sync: {} B",
        plan.gradient_sync_bytes_per_replica
    );
    for w in &plan.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
    out
}

/// Human-readable summary of one simulated training step.
pub fn sim_report(metrics: &SimMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Simulated step: {:.6} s, throughput {:.3} samples/s",
        metrics.step_time, metrics.throughput
    );
    for (device, m) in &metrics.per_device {
        let _ = writeln!(
            out,
            "  device {device}: busy {:.6} s, utilization {:.4}, idle {:.4}",
            m.busy_time, m.utilization, m.idle_fraction
        );
    }
    for (stage, peak) in metrics.per_stage_peak_mem.iter().enumerate() {
        let _ = writeln!(out, "  stage {stage} peak memory: {peak} B");
    }
    let _ = writeln!(
        out,
        "  total communication: {} B",
        metrics.total_comm_bytes
    );
    let _ = writeln!(
        out,
        "  gradient sync per replica: {} B",
        metrics.gradient_sync_bytes_per_replica
    );
    if metrics.has_oom() {
        let _ = writeln!(out, "  memory defects:");
        for d in &metrics.oom_defects {
            let _ = writeln!(out, "    {d}");
        }
    }
    out
}

/// Side-by-side comparison of the even and balanced batch allocations.
pub fn compare_report(even: &SimMetrics, balanced: &SimMetrics) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "even step time:     {:.6} s", even.step_time);
    let _ = writeln!(out, "balanced step time: {:.6} s", balanced.step_time);
    if balanced.step_time > 0.0 {
        let _ = writeln!(
            out,
            "speedup (even/balanced): {:.2}x",
            even.step_time / balanced.step_time
        );
    }
    out
}

// ── Tests ────────────────────────────────────────────────────────────────
