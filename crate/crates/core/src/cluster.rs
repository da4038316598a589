//! Cluster description and virtual-device layout.
//!
//! A cluster file lists devices in a fixed order; planning consumes devices
//! sequentially in that order. Each TaskGraph receives one ordered device
//! group (a *virtual device*) per plan replica; when the cluster holds a
//! multiple of the devices one replica needs, whole extra replicas are
//! formed (nested data parallelism). Devices are never shared across
//! TaskGraphs.

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

// ── Types ────────────────────────────────────────────────────────────────

/// One accelerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    /// Peak compute throughput (flop/s).
    pub flops_per_sec: f64,
    /// Device memory capacity.
    pub mem_bytes: u64,
    /// Host node; devices sharing a node communicate at `intra_node_bw`.
    pub node_id: String,
    /// Bandwidth between devices on the same node (bytes/s).
    pub intra_node_bw: f64,
    /// Bandwidth between devices on different nodes (bytes/s).
    pub inter_node_bw: f64,
}

/// Ordered device list making up a cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cluster {
    pub devices: Vec<DeviceSpec>,
}

impl Cluster {
    pub fn device(&self, id: &str) -> &DeviceSpec {
        self.devices
            .iter()
            .find(|d| d.id == id)
            .expect("device id resolved during validation")
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

/// Ordered device group serving one TaskGraph within one replica.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualDevice {
    pub taskgraph_index: usize,
    pub replica_index: usize,
    /// Device ids, in stage-internal order.
    pub devices: Vec<String>,
}

/// Result of laying out virtual devices over a cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualLayout {
    /// Replica-major: all of replica 0's TaskGraphs, then replica 1's, …
    pub virtual_devices: Vec<VirtualDevice>,
    /// Nested data-parallel degree: ⌊K / Σ counts⌋.
    pub degree: usize,
    /// Devices left over after forming whole replicas (K mod Σ counts).
    pub idle: Vec<String>,
}

impl VirtualLayout {
    /// The virtual device of `taskgraph` within `replica`.
    pub fn vd(&self, replica: usize, taskgraph: usize) -> &VirtualDevice {
        let per_replica = self.virtual_devices.len() / self.degree.max(1);
        &self.virtual_devices[replica * per_replica + taskgraph]
    }
}

// ── Parsing ──────────────────────────────────────────────────────────────

/// Parse a cluster document and validate device fields.
pub fn parse_cluster(text: &str) -> Result<Cluster> {
    let cluster: Cluster =
        serde_json::from_str(text).map_err(|e| PlanError::Schema(e.to_string()))?;
    validate_cluster(&cluster)?;
    Ok(cluster)
}

pub fn validate_cluster(cluster: &Cluster) -> Result<()> {
    if cluster.devices.is_empty() {
        return Err(PlanError::Schema("cluster declares no devices".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in &cluster.devices {
        if !seen.insert(d.id.as_str()) {
            return Err(PlanError::Schema(format!("duplicate device id `{}`", d.id)));
        }
        if !(d.flops_per_sec.is_finite() && d.flops_per_sec > 0.0) {
            return Err(PlanError::Schema(format!(
                "device `{}` flops_per_sec must be positive",
                d.id
            )));
        }
        if d.mem_bytes == 0 {
            return Err(PlanError::Schema(format!(
                "device `{}` mem_bytes must be positive",
                d.id
            )));
        }
        for (name, bw) in [("intra_node_bw", d.intra_node_bw), ("inter_node_bw", d.inter_node_bw)]
        {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(PlanError::Schema(format!(
                    "device `{}` {name} must be positive",
                    d.id
                )));
            }
        }
        if d.intra_node_bw < d.inter_node_bw {
            return Err(PlanError::Schema(format!(
                "device `{}` intra_node_bw {} is below inter_node_bw {}",
                d.id, d.intra_node_bw, d.inter_node_bw
            )));
        }
    }
    Ok(())
}

// ── Layout ───────────────────────────────────────────────────────────────

/// Assign cluster devices to TaskGraphs.
///
/// `counts[i]` is the device count TaskGraph `i` needs within one replica.
/// Devices are taken sequentially in cluster order; whole extra replicas
/// are formed while devices last (nested data parallelism of degree
/// ⌊K / Σ counts⌋); the remainder is reported idle. A cluster smaller than
/// one replica is an error.
pub fn generate_virtual_devices(cluster: &Cluster, counts: &[usize]) -> Result<VirtualLayout> {
    if counts.is_empty() || counts.iter().any(|&c| c == 0) {
        return Err(PlanError::Schema(
            "virtual-device counts must be non-empty and positive".into(),
        ));
    }
    let per_replica: usize = counts.iter().sum();
    let available = cluster.devices.len();
    if available < per_replica {
        return Err(PlanError::InsufficientDevices {
            required: per_replica,
            available,
        });
    }
    let degree = available / per_replica;
    let mut virtual_devices = Vec::with_capacity(degree * counts.len());
    let mut next = 0usize;
    for replica_index in 0..degree {
        for (taskgraph_index, &count) in counts.iter().enumerate() {
            let devices = cluster.devices[next..next + count]
                .iter()
                .map(|d| d.id.clone())
                .collect();
            virtual_devices.push(VirtualDevice {
                taskgraph_index,
                replica_index,
                devices,
            });
            next += count;
        }
    }
    let idle = cluster.devices[next..].iter().map(|d| d.id.clone()).collect();
    Ok(VirtualLayout {
        virtual_devices,
        degree,
        idle,
    })
}

/// Stable-sort a device sequence by memory capacity, descending. Ties keep
/// cluster order, so equal-memory sequences come back unchanged.
///
/// Pipelined plans run this over each replica's full device sequence before
/// dealing devices out to stages, so the first (most activation-burdened)
/// stage receives the highest-memory device.
pub fn order_devices_by_memory(devices: &[String], cluster: &Cluster) -> Vec<String> {
    let mut ordered = devices.to_vec();
    ordered.sort_by_key(|id| std::cmp::Reverse(cluster.device(id).mem_bytes));
    ordered
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn homogeneous(n: usize) -> Cluster {
        Cluster {
            devices: (0..n)
                .map(|i| DeviceSpec {
                    id: format!("g{i}"),
                    flops_per_sec: 1e12,
                    mem_bytes: 16 << 30,
                    node_id: format!("n{}", i / 8),
                    intra_node_bw: 1.5e11,
                    inter_node_bw: 1.25e10,
                })
                .collect(),
        }
    }

    fn with_memories(mems_gb: &[u64]) -> Cluster {
        Cluster {
            devices: mems_gb
                .iter()
                .enumerate()
                .map(|(i, &gb)| DeviceSpec {
                    id: format!("g{i}"),
                    flops_per_sec: 1e12,
                    mem_bytes: gb << 30,
                    node_id: "n0".into(),
                    intra_node_bw: 1.5e11,
                    inter_node_bw: 1.25e10,
                })
                .collect(),
        }
    }

    #[test]
    fn sequential_take_with_nested_replicas() {
        let layout = generate_virtual_devices(&homogeneous(8), &[2, 2]).unwrap();
        assert_eq!(layout.degree, 2);
        assert!(layout.idle.is_empty());
        assert_eq!(layout.vd(0, 0).devices, vec!["g0", "g1"]);
        assert_eq!(layout.vd(0, 1).devices, vec!["g2", "g3"]);
        assert_eq!(layout.vd(1, 0).devices, vec!["g4", "g5"]);
        assert_eq!(layout.vd(1, 1).devices, vec!["g6", "g7"]);
    }

    #[test]
    fn exact_fit_has_degree_one() {
        let layout = generate_virtual_devices(&homogeneous(2), &[1, 1]).unwrap();
        assert_eq!(layout.degree, 1);
        assert!(layout.idle.is_empty());
        assert_eq!(layout.virtual_devices.len(), 2);
    }

    #[test]
    fn too_few_devices_is_an_error() {
        match generate_virtual_devices(&homogeneous(3), &[2, 2]) {
            Err(PlanError::InsufficientDevices {
                required,
                available,
            }) => {
                assert_eq!(required, 4);
                assert_eq!(available, 3);
            }
            other => panic!("expected insufficient-devices error, got {other:?}"),
        }
    }

    #[test]
    fn leftover_devices_go_idle() {
        let layout = generate_virtual_devices(&homogeneous(5), &[2, 2]).unwrap();
        assert_eq!(layout.degree, 1);
        assert_eq!(layout.idle, vec!["g4"]);
    }

    #[test]
    fn memory_reorder_prefers_larger_first() {
        let cluster = with_memories(&[16, 32]);
        let ids: Vec<String> = cluster.devices.iter().map(|d| d.id.clone()).collect();
        assert_eq!(order_devices_by_memory(&ids, &cluster), vec!["g1", "g0"]);
    }

    #[test]
    fn memory_reorder_is_stable() {
        let equal = with_memories(&[16, 16, 16]);
        let ids: Vec<String> = equal.devices.iter().map(|d| d.id.clone()).collect();
        assert_eq!(order_devices_by_memory(&ids, &equal), ids);

        let mixed = with_memories(&[16, 32, 16, 32]);
        let ids: Vec<String> = mixed.devices.iter().map(|d| d.id.clone()).collect();
        assert_eq!(
            order_devices_by_memory(&ids, &mixed),
            vec!["g1", "g3", "g0", "g2"]
        );
    }

    #[test]
    fn cluster_file_round_trips() {
        let cluster = homogeneous(2);
        let text = serde_json::to_string_pretty(&cluster).unwrap();
        assert_eq!(parse_cluster(&text).unwrap(), cluster);
    }

    #[test]
    fn inverted_bandwidth_classes_rejected() {
        let mut cluster = homogeneous(1);
        cluster.devices[0].intra_node_bw = 1.0;
        cluster.devices[0].inter_node_bw = 2.0;
        assert!(matches!(
            validate_cluster(&cluster),
            Err(PlanError::Schema(_))
        ));
    }

    #[test]
    fn every_device_is_assigned_or_idle() {
        // Conservation and disjointness over a small grid of layouts.
        for k in 1..=12usize {
            let cluster = homogeneous(k);
            for counts in [vec![1], vec![2], vec![1, 1], vec![2, 1], vec![2, 2], vec![3, 1, 2]] {
                let per_replica: usize = counts.iter().sum();
                match generate_virtual_devices(&cluster, &counts) {
                    Ok(layout) => {
                        let mut seen = std::collections::BTreeSet::new();
                        for vd in &layout.virtual_devices {
                            for d in &vd.devices {
                                assert!(seen.insert(d.clone()), "device {d} assigned twice");
                            }
                        }
                        for d in &layout.idle {
                            assert!(seen.insert(d.clone()), "idle device {d} also assigned");
                        }
                        assert_eq!(seen.len(), k);
                        assert_eq!(layout.degree, k / per_replica);
                    }
                    Err(PlanError::InsufficientDevices { .. }) => {
                        assert!(k < per_replica);
                    }
                    Err(other) => panic!("unexpected error {other:?}"),
                }
            }
        }
    }
}
