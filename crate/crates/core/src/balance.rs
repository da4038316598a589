//! Memory-constrained load balancing across heterogeneous devices.
//!
//! The balancer assigns each device of a TaskGraph a load ratio L_i
//! (Σ L_i = 1), minimizing Σ |L_i − DF_i/Σ DF| subject to
//! L_i · TG_mem ≤ DM_i: loads proportional to compute power, bent only as
//! far as memory capacities force. Ratio arithmetic runs in exact rationals
//! and is emitted as decimals, so runs are reproducible bit-for-bit.
//!
//! The algorithm starts from the proportional assignment, then repeatedly
//! shifts load from the device with the highest memory utilization (the
//! *peak*) to the free device with the lowest flop utilization (the
//! *valley*) until no device exceeds its memory or no free capacity
//! remains. Every iteration retires a device from the oom or free set, so
//! the loop terminates within 2·N iterations.

use std::collections::BTreeSet;

use num::rational::BigRational;
use num::{BigInt, FromPrimitive, One, ToPrimitive, Zero};

use crate::cluster::DeviceSpec;
use crate::error::{PlanError, Result};

// ── Types ────────────────────────────────────────────────────────────────

/// Per-device load ratios, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadAssignment {
    pub ratios: Vec<f64>,
}

/// Working state of the balancing loop. Ratios and utilizations are exact
/// rationals; `oom` holds devices whose memory utilization exceeds 1,
/// `free` the devices that may still absorb load.
#[derive(Debug, Clone)]
pub struct BalanceState {
    pub load_ratios: Vec<BigRational>,
    pub mem_utils: Vec<BigRational>,
    pub flop_utils: Vec<BigRational>,
    pub oom: BTreeSet<usize>,
    pub free: BTreeSet<usize>,
    tg_mem: BigRational,
    tg_flop: BigRational,
    df: Vec<BigRational>,
    dm: Vec<BigRational>,
}

fn rational(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite value validated upstream")
}

fn rational_u64(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from_u64(v).expect("u64 fits BigInt"))
}

impl BalanceState {
    /// Proportional starting point: L_i = DF_i / Σ DF.
    pub fn init(devices: &[DeviceSpec], tg_mem: u64, tg_flop: u64) -> BalanceState {
        let df: Vec<BigRational> = devices.iter().map(|d| rational(d.flops_per_sec)).collect();
        let dm: Vec<BigRational> = devices.iter().map(|d| rational_u64(d.mem_bytes)).collect();
        let total_df: BigRational = df.iter().cloned().sum();
        let load_ratios: Vec<BigRational> = df.iter().map(|f| f / &total_df).collect();
        let mut state = BalanceState {
            load_ratios,
            mem_utils: vec![BigRational::zero(); devices.len()],
            flop_utils: vec![BigRational::zero(); devices.len()],
            oom: BTreeSet::new(),
            free: BTreeSet::new(),
            tg_mem: rational_u64(tg_mem),
            tg_flop: rational_u64(tg_flop),
            df,
            dm,
        };
        for i in 0..devices.len() {
            state.update_profile(i);
        }
        let one = BigRational::one();
        for i in 0..devices.len() {
            if state.mem_utils[i] > one {
                state.oom.insert(i);
            } else {
                state.free.insert(i);
            }
        }
        state
    }

    /// Recompute a device's memory and flop utilization from its ratio.
    pub fn update_profile(&mut self, i: usize) {
        self.mem_utils[i] = &self.load_ratios[i] * &self.tg_mem / &self.dm[i];
        self.flop_utils[i] = &self.load_ratios[i] * &self.tg_flop / &self.df[i];
    }

    /// Ratio-space memory capacity of device `i`: DM_i / TG_mem.
    fn capacity(&self, i: usize) -> BigRational {
        &self.dm[i] / &self.tg_mem
    }

    /// Overloaded device with the highest memory utilization (ties toward
    /// the lower index).
    pub fn peak(&self) -> Option<usize> {
        self.oom
            .iter()
            .copied()
            .max_by(|&a, &b| {
                self.mem_utils[a]
                    .cmp(&self.mem_utils[b])
                    .then(b.cmp(&a))
            })
    }

    /// Free device with the lowest (flop util, mem util) — the device with
    /// the most spare compute, memory as tie-break, index last.
    pub fn valley(&self) -> Option<usize> {
        self.free
            .iter()
            .copied()
            .min_by(|&a, &b| {
                self.flop_utils[a]
                    .cmp(&self.flop_utils[b])
                    .then(self.mem_utils[a].cmp(&self.mem_utils[b]))
                    .then(a.cmp(&b))
            })
    }
}

// ── Operations ───────────────────────────────────────────────────────────

/// Load ratios proportional to compute power, ignoring memory.
pub fn init_proportional(devices: &[DeviceSpec]) -> LoadAssignment {
    let state = BalanceState::init(devices, 0, 0);
    LoadAssignment {
        ratios: emit(&state.load_ratios),
    }
}

/// Balance objective: Σ |L_i − DF_i / Σ DF|. Zero iff the assignment is
/// exactly proportional.
pub fn objective(assignment: &LoadAssignment, devices: &[DeviceSpec]) -> f64 {
    let total: f64 = devices.iter().map(|d| d.flops_per_sec).sum();
    assignment
        .ratios
        .iter()
        .zip(devices)
        .map(|(l, d)| (l - d.flops_per_sec / total).abs())
        .sum()
}

/// Move load from `peak` to `valley`: δ = min(peak overload, valley
/// headroom). Returns false (no shift) when the valley has no remaining
/// capacity.
pub fn shift_load(state: &mut BalanceState, peak: usize, valley: usize) -> bool {
    let overload = &state.load_ratios[peak] - state.capacity(peak);
    let headroom = state.capacity(valley) - &state.load_ratios[valley];
    let delta = overload.min(headroom);
    if delta <= BigRational::zero() {
        return false;
    }
    state.load_ratios[peak] -= &delta;
    state.load_ratios[valley] += &delta;
    state.update_profile(peak);
    state.update_profile(valley);
    true
}

/// Memory-constrained balancing. Returns the final ratios, or an
/// infeasibility error naming each device's residual overload when the
/// TaskGraph cannot fit (Σ DM < TG_mem).
pub fn memory_constraint_balance(
    devices: &[DeviceSpec],
    tg_mem: u64,
    tg_flop: u64,
) -> Result<LoadAssignment> {
    balance_with_stats(devices, tg_mem, tg_flop).map(|(a, _)| a)
}

/// As [`memory_constraint_balance`], also reporting the iteration count
/// (bounded by 2·N: every iteration retires a device from `oom` or
/// `free`).
pub fn balance_with_stats(
    devices: &[DeviceSpec],
    tg_mem: u64,
    tg_flop: u64,
) -> Result<(LoadAssignment, usize)> {
    let mut state = BalanceState::init(devices, tg_mem, tg_flop);
    let one = BigRational::one();
    let mut iterations = 0usize;
    while !state.oom.is_empty() && !state.free.is_empty() {
        iterations += 1;
        debug_assert!(iterations <= 2 * devices.len());
        let peak = state.peak().expect("oom set non-empty");
        let valley = state.valley().expect("free set non-empty");
        if shift_load(&mut state, peak, valley) {
            if state.mem_utils[peak] <= one {
                state.oom.remove(&peak);
            }
            // A valley filled to capacity can never absorb more; retiring
            // it now (rather than on a later failed shift) keeps every
            // iteration productive.
            if state.mem_utils[valley] >= one {
                state.free.remove(&valley);
            }
        } else {
            state.free.remove(&valley);
        }
    }
    if !state.oom.is_empty() {
        let residuals: Vec<String> = state
            .oom
            .iter()
            .map(|&i| {
                let over = (&state.load_ratios[i] * &state.tg_mem - &state.dm[i])
                    .to_f64()
                    .unwrap_or(f64::INFINITY);
                format!("{} over by {:.0} bytes", devices[i].id, over.max(0.0))
            })
            .collect();
        return Err(PlanError::Infeasible(format!(
            "task graph of {} bytes exceeds combined device memory ({})",
            state.tg_mem.to_f64().unwrap_or(f64::NAN),
            residuals.join(", ")
        )));
    }
    Ok((
        LoadAssignment {
            ratios: emit(&state.load_ratios),
        },
        iterations,
    ))
}

/// Emit exact ratios as decimals (nearest f64).
fn emit(ratios: &[BigRational]) -> Vec<f64> {
    ratios
        .iter()
        .map(|r| r.to_f64().expect("ratio within f64 range"))
        .collect()
}

/// Quantize ratios into integer per-device batch sizes by largest
/// remainder; every device receives at least one sample.
pub fn assignment_to_batches(assignment: &LoadAssignment, global_batch: u64) -> Result<Vec<u64>> {
    let n = assignment.ratios.len();
    if (global_batch as usize) < n {
        return Err(PlanError::UnderfullBatch {
            batch: global_batch,
            devices: n,
        });
    }
    let quotas: Vec<f64> = assignment
        .ratios
        .iter()
        .map(|r| r * global_batch as f64)
        .collect();
    let mut batches: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = batches.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take((global_batch - assigned) as usize) {
        batches[i] += 1;
    }
    // Largest remainder can starve a tiny ratio; top zeros up from the
    // largest allocation (global_batch ≥ n guarantees this converges).
    while batches.iter().any(|&b| b == 0) {
        let zero = batches.iter().position(|&b| b == 0).expect("checked");
        let donor = (0..n)
            .max_by(|&a, &b| batches[a].cmp(&batches[b]).then(b.cmp(&a)))
            .expect("non-empty");
        batches[donor] -= 1;
        batches[zero] += 1;
    }
    debug_assert_eq!(batches.iter().sum::<u64>(), global_batch);
    Ok(batches)
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn devices(df_dm: &[(f64, u64)]) -> Vec<DeviceSpec> {
        df_dm
            .iter()
            .enumerate()
            .map(|(i, &(df, dm))| DeviceSpec {
                id: format!("g{i}"),
                flops_per_sec: df,
                mem_bytes: dm,
                node_id: "n0".into(),
                intra_node_bw: 1.5e11,
                inter_node_bw: 1.25e10,
            })
            .collect()
    }

    const GB: u64 = 1 << 30;

    #[test]
    fn proportional_init_equal_devices() {
        let d = devices(&[(1.0, GB), (1.0, GB), (1.0, GB), (1.0, GB)]);
        assert_eq!(init_proportional(&d).ratios, vec![0.25; 4]);
    }

    #[test]
    fn proportional_init_two_to_one() {
        let d = devices(&[(2.0, GB), (1.0, GB)]);
        let a = init_proportional(&d);
        assert_eq!(a.ratios, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn proportional_init_fractional_flops() {
        let d = devices(&[(15.7e12, GB), (9.3e12, GB)]);
        let a = init_proportional(&d);
        assert!((a.ratios[0] - 0.628).abs() < 1e-12);
        assert!((a.ratios[1] - 0.372).abs() < 1e-12);
    }

    #[test]
    fn objective_zero_at_proportional() {
        let d = devices(&[(2.0, GB), (1.0, GB)]);
        let a = init_proportional(&d);
        assert_eq!(objective(&a, &d), 0.0);
    }

    #[test]
    fn objective_of_skewed_assignment() {
        // Equal devices, ratios [0.5, 0.5] vs [2/3, 1/3] target.
        let d = devices(&[(2.0, GB), (1.0, GB)]);
        let a = LoadAssignment {
            ratios: vec![0.5, 0.5],
        };
        assert!((objective(&a, &d) - 1.0 / 3.0).abs() < 1e-15);
        let single = devices(&[(5.0, GB)]);
        let whole = LoadAssignment { ratios: vec![1.0] };
        assert_eq!(objective(&whole, &single), 0.0);
    }

    #[test]
    fn no_memory_pressure_returns_proportional_exactly() {
        // TG of 20 GB on [32, 16] GB devices with DF [2, 1]: proportional
        // loads fit, nothing moves.
        let d = devices(&[(2.0, 32 * GB), (1.0, 16 * GB)]);
        let balanced = memory_constraint_balance(&d, 20 * GB, 100).unwrap();
        assert_eq!(balanced.ratios, init_proportional(&d).ratios);
    }

    #[test]
    fn hand_traced_rebalance() {
        // TG_mem 40 GB, DM [32, 16] GB, DF [1, 3]: proportional [0.25,
        // 0.75] overloads device 1 (0.75·40 = 30 > 16); the exact shift of
        // 0.35 lands on [0.6, 0.4].
        let d = devices(&[(1.0, 32 * GB), (3.0, 16 * GB)]);
        let balanced = memory_constraint_balance(&d, 40 * GB, 1000).unwrap();
        assert_eq!(balanced.ratios, vec![0.6, 0.4]);
    }

    #[test]
    fn infeasible_when_memory_sums_short() {
        // 60 GB cannot fit in 32 + 16 GB.
        let d = devices(&[(1.0, 32 * GB), (1.0, 16 * GB)]);
        assert!(matches!(
            memory_constraint_balance(&d, 60 * GB, 1000),
            Err(PlanError::Infeasible(_))
        ));
    }

    #[test]
    fn shift_is_bounded_by_headroom() {
        // Valley headroom 0.2 < overload 0.5: only 0.2 moves and the peak
        // stays overloaded. Capacities: peak 0.3 at load 0.8, valley 0.4
        // at load 0.2.
        let d = devices(&[(1.0, 3 * GB), (1.0, 4 * GB)]);
        let mut state = BalanceState::init(&d, 10 * GB, 100);
        state.load_ratios[0] = BigRational::from_float(0.8).unwrap();
        state.load_ratios[1] = BigRational::from_float(0.2).unwrap();
        state.update_profile(0);
        state.update_profile(1);
        assert!(shift_load(&mut state, 0, 1));
        let l0 = state.load_ratios[0].to_f64().unwrap();
        let l1 = state.load_ratios[1].to_f64().unwrap();
        assert_eq!(l1, 0.4); // filled to capacity
        assert!((l0 - 0.6).abs() < 1e-15);
        assert!(state.mem_utils[0] > BigRational::one()); // still oom

        // Second shift against the now-full valley fails.
        assert!(!shift_load(&mut state, 0, 1));
    }

    #[test]
    fn batches_follow_largest_remainder() {
        let a = LoadAssignment {
            ratios: vec![2.0 / 3.0, 1.0 / 3.0],
        };
        assert_eq!(assignment_to_batches(&a, 6).unwrap(), vec![4, 2]);

        let even = LoadAssignment {
            ratios: vec![0.5, 0.5],
        };
        assert_eq!(assignment_to_batches(&even, 8).unwrap(), vec![4, 4]);

        let skew = LoadAssignment {
            ratios: vec![0.628, 0.372],
        };
        assert_eq!(assignment_to_batches(&skew, 10).unwrap(), vec![6, 4]);
    }

    #[test]
    fn batches_never_starve_a_device() {
        let a = LoadAssignment {
            ratios: vec![0.98, 0.01, 0.01],
        };
        let b = assignment_to_batches(&a, 3).unwrap();
        assert_eq!(b.iter().sum::<u64>(), 3);
        assert!(b.iter().all(|&x| x >= 1));
    }

    #[test]
    fn underfull_batch_is_an_error() {
        let a = LoadAssignment {
            ratios: vec![0.5, 0.3, 0.2],
        };
        assert!(matches!(
            assignment_to_batches(&a, 2),
            Err(PlanError::UnderfullBatch { batch: 2, devices: 3 })
        ));
    }

    #[test]
    fn randomized_instances_conserve_load_and_terminate() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let d: Vec<DeviceSpec> = (0..n)
                .map(|i| DeviceSpec {
                    id: format!("g{i}"),
                    flops_per_sec: rng.gen_range(1.0..20.0) * 1e12,
                    mem_bytes: rng.gen_range(8..48) * GB,
                    node_id: "n0".into(),
                    intra_node_bw: 1.5e11,
                    inter_node_bw: 1.25e10,
                })
                .collect();
            let tg_mem = rng.gen_range(1..200) * GB;
            let tg_flop = rng.gen_range(1..1_000_000u64);
            let total_mem: u64 = d.iter().map(|x| x.mem_bytes).sum();
            match balance_with_stats(&d, tg_mem, tg_flop) {
                Ok((a, iters)) => {
                    assert!(iters <= 2 * n, "took {iters} iterations for n={n}");
                    let sum: f64 = a.ratios.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-9, "ratios sum to {sum}");
                    for (r, dev) in a.ratios.iter().zip(&d) {
                        // Allow one ulp of slack from the final decimal emit.
                        assert!(
                            r * tg_mem as f64 <= dev.mem_bytes as f64 * (1.0 + 1e-12),
                            "load {r} breaks {} byte bound",
                            dev.mem_bytes
                        );
                        assert!(*r >= 0.0);
                    }
                }
                Err(PlanError::Infeasible(_)) => {
                    assert!(total_mem < tg_mem, "feasible instance reported infeasible");
                }
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
    }
}
