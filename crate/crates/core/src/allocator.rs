//! Per-round admission and bandwidth/power allocation for the scheduled
//! clients.
//!
//! The objective is the number of clients that can finish their upload
//! within the deadline. Two facts drive the solution:
//!
//! * at the optimum an admitted client's upload takes exactly the deadline,
//!   so its bandwidth is the root of `B log2(1 + P g / (B N0)) = S / deadline`;
//! * transmission time falls with power, bandwidth and gain, so every
//!   admitted client should transmit at `P_max`, and the bandwidth it needs
//!   falls as its gain rises.
//!
//! [`linear_search_allocate`] therefore walks clients from strongest to
//! weakest channel, granting each `P_max` and its deadline-tight bandwidth
//! until the budget runs out. [`brute_force_allocate`] enumerates every subset
//! and is used to check that the greedy walk is optimal.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::channel::{achievable_rate, asymptotic_rate, ChannelRealization};
use crate::error::{Error, Result};

/// Relative slack on the bandwidth budget so bisection rounding cannot flip
/// feasibility.
pub const BUDGET_SLACK: f64 = 1e-12;

/// Largest instance [`brute_force_allocate`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceBudget {
    /// Total uplink bandwidth for the round, Hz.
    pub total_bandwidth: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Upload deadline, s.
    pub deadline: f64,
    /// Model packet size, bits.
    pub packet_bits: f64,
}

impl ResourceBudget {
    pub fn new(
        total_bandwidth: f64,
        p_min: f64,
        p_max: f64,
        deadline: f64,
        packet_bits: f64,
    ) -> Result<Self> {
        if !(total_bandwidth >= 0.0 && total_bandwidth.is_finite()) {
            return Err(Error::invalid(format!(
                "bandwidth budget must be finite and >= 0, got {total_bandwidth}"
            )));
        }
        if !(p_min >= 0.0 && p_min <= p_max && p_max.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 <= P_min <= P_max, got {p_min}, {p_max}"
            )));
        }
        if !(deadline > 0.0 && deadline.is_finite()) {
            return Err(Error::invalid(format!(
                "deadline must be positive, got {deadline}"
            )));
        }
        if !(packet_bits > 0.0 && packet_bits.is_finite()) {
            return Err(Error::invalid(format!(
                "packet size must be positive, got {packet_bits}"
            )));
        }
        Ok(Self {
            total_bandwidth,
            p_min,
            p_max,
            deadline,
            packet_bits,
        })
    }

    /// Required throughput `S / deadline`, bits/s.
    pub fn target_rate(&self) -> f64 {
        self.packet_bits / self.deadline
    }

    fn fits(&self, used: f64) -> bool {
        used <= self.total_bandwidth * (1.0 + BUDGET_SLACK)
    }
}

/// Resources granted to one scheduled client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub client_id: usize,
    pub admitted: bool,
    pub bandwidth: f64,
    pub power: f64,
}

impl Allocation {
    fn rejected(client_id: usize) -> Self {
        Self {
            client_id,
            admitted: false,
            bandwidth: 0.0,
            power: 0.0,
        }
    }
}

/// Allocation for every scheduled client, in the order they were given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub entries: Vec<Allocation>,
}

impl AllocationPlan {
    pub fn admitted_count(&self) -> usize {
        self.entries.iter().filter(|a| a.admitted).count()
    }

    /// Admitted client ids, ascending.
    pub fn admitted_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .entries
            .iter()
            .filter(|a| a.admitted)
            .map(|a| a.client_id)
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn bandwidth_used(&self) -> f64 {
        self.entries.iter().map(|a| a.bandwidth).sum()
    }

    pub fn get(&self, client_id: usize) -> Option<&Allocation> {
        self.entries.iter().find(|a| a.client_id == client_id)
    }
}

/// Smallest bandwidth at which an upload at power `power` over gain `gain`
/// meets the deadline exactly, or `None` when no finite bandwidth suffices
/// (the rate ceiling `P g / (N0 ln 2)` is at or below `S / deadline`).
///
/// The rate is increasing in bandwidth, so the root is bracketed by doubling
/// and then bisected. The upper end of the final bracket is returned, so the
/// returned bandwidth always meets the deadline.
pub fn required_bandwidth(
    power: f64,
    gain: f64,
    noise_psd: f64,
    packet_bits: f64,
    deadline: f64,
) -> Option<f64> {
    if !(power > 0.0 && gain > 0.0 && noise_psd > 0.0 && packet_bits > 0.0 && deadline > 0.0) {
        return None;
    }
    let target = packet_bits / deadline;
    if asymptotic_rate(power, gain, noise_psd) <= target {
        return None;
    }
    let rate = |b: f64| achievable_rate(b, power, gain, noise_psd).unwrap_or(0.0);

    let mut hi = target;
    while rate(hi) < target {
        hi *= 2.0;
        if !hi.is_finite() {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rate(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Some(hi)
}

fn gain_order(a: &ChannelRealization, b: &ChannelRealization) -> Ordering {
    b.gain
        .total_cmp(&a.gain)
        .then_with(|| a.client_id.cmp(&b.client_id))
}

/// Greedy linear search: strongest channel first, `P_max` and deadline-tight
/// bandwidth for each, stopping at the first client that no longer fits.
///
/// Clients for which no finite bandwidth meets the deadline are rejected
/// without stopping the walk.
pub fn linear_search_allocate(
    scheduled: &[ChannelRealization],
    budget: &ResourceBudget,
    noise_psd: f64,
) -> AllocationPlan {
    let mut order: Vec<&ChannelRealization> = scheduled.iter().collect();
    order.sort_by(|a, b| gain_order(a, b));

    let mut granted: Vec<(usize, f64)> = Vec::new();
    let mut used = 0.0;
    for client in order {
        let Some(need) = required_bandwidth(
            budget.p_max,
            client.gain,
            noise_psd,
            budget.packet_bits,
            budget.deadline,
        ) else {
            continue;
        };
        if !budget.fits(used + need) {
            break;
        }
        used += need;
        granted.push((client.client_id, need));
    }

    let entries = scheduled
        .iter()
        .map(
            |c| match granted.iter().find(|(id, _)| *id == c.client_id) {
                Some(&(client_id, bandwidth)) => Allocation {
                    client_id,
                    admitted: true,
                    bandwidth,
                    power: budget.p_max,
                },
                None => Allocation::rejected(c.client_id),
            },
        )
        .collect();
    AllocationPlan { entries }
}

/// Exhaustive search over all subsets of at most [`BRUTE_FORCE_LIMIT`]
/// clients.
///
/// A subset is feasible when every member can meet the deadline at `P_max`
/// and their deadline-tight bandwidths fit the budget (`P_max` minimizes each
/// member's bandwidth, so no other power choice can make an infeasible
/// subset feasible). Returns a largest feasible subset; ties go to the
/// lexicographically smallest list of sorted client ids.
pub fn brute_force_allocate(
    scheduled: &[ChannelRealization],
    budget: &ResourceBudget,
    noise_psd: f64,
) -> Result<AllocationPlan> {
    if scheduled.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::invalid(format!(
            "brute force is limited to {BRUTE_FORCE_LIMIT} clients, got {}",
            scheduled.len()
        )));
    }
    let needs: Vec<Option<f64>> = scheduled
        .iter()
        .map(|c| {
            required_bandwidth(
                budget.p_max,
                c.gain,
                noise_psd,
                budget.packet_bits,
                budget.deadline,
            )
        })
        .collect();

    let mut best: Option<(u32, Vec<usize>)> = None;
    for mask in 0u32..(1u32 << scheduled.len()) {
        let mut used = 0.0;
        let mut feasible = true;
        for (i, need) in needs.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            match need {
                Some(b) => used += b,
                None => {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible || !budget.fits(used) {
            continue;
        }
        let mut ids: Vec<usize> = (0..scheduled.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| scheduled[i].client_id)
            .collect();
        ids.sort_unstable();
        let better = match &best {
            None => true,
            Some((best_mask, best_ids)) => {
                let (n, m) = (mask.count_ones(), best_mask.count_ones());
                n > m || (n == m && ids < *best_ids)
            }
        };
        if better {
            best = Some((mask, ids));
        }
    }

    let mask = best.map_or(0, |(m, _)| m);
    let entries = scheduled
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if mask & (1 << i) != 0 {
                Allocation {
                    client_id: c.client_id,
                    admitted: true,
                    bandwidth: needs[i].expect("feasible members have a bandwidth"),
                    power: budget.p_max,
                }
            } else {
                Allocation::rejected(c.client_id)
            }
        })
        .collect();
    Ok(AllocationPlan { entries })
}

/// Equal split benchmark: every scheduled client transmits with
/// `B_total / population` and `P_max`, without admission control.
pub fn uniform_allocate(
    scheduled: &[ChannelRealization],
    budget: &ResourceBudget,
    population: usize,
) -> AllocationPlan {
    let share = if population == 0 {
        0.0
    } else {
        budget.total_bandwidth / population as f64
    };
    let entries = scheduled
        .iter()
        .map(|c| Allocation {
            client_id: c.client_id,
            admitted: share > 0.0,
            bandwidth: share,
            power: if share > 0.0 { budget.p_max } else { 0.0 },
        })
        .collect();
    AllocationPlan { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{comm_time, dbm_to_watts};

    const N0: f64 = 3.981_071_705_534_985e-21;

    fn budget(total: f64) -> ResourceBudget {
        ResourceBudget::new(total, dbm_to_watts(0.0), dbm_to_watts(20.0), 1e-4, 640.0).unwrap()
    }

    fn client(id: usize, gain: f64) -> ChannelRealization {
        ChannelRealization {
            client_id: id,
            distance_m: 100.0,
            gain,
        }
    }

    #[test]
    fn boundary_capacity_is_infeasible() {
        let (p, g, s, deadline) = (0.1, 1e-10, 640.0, 1e-4);
        // Pick N0 so the rate ceiling equals S / deadline exactly.
        let n0 = p * g / (std::f64::consts::LN_2 * (s / deadline));
        assert!(asymptotic_rate(p, g, n0) <= s / deadline);
        assert_eq!(required_bandwidth(p, g, n0, s, deadline), None);
    }

    #[test]
    fn required_bandwidth_meets_deadline_tightly() {
        for gain in [5e-13, 1e-12, 1e-11, 1e-10, 1e-8] {
            let b = required_bandwidth(0.1, gain, N0, 640.0, 1e-4).unwrap();
            let rate = achievable_rate(b, 0.1, gain, N0).unwrap();
            assert!((rate * 1e-4 - 640.0).abs() <= 1e-8 * 640.0, "gain {gain}");
            assert!(comm_time(640.0, rate) <= 1e-4);
        }
    }

    #[test]
    fn required_bandwidth_matches_grid_scan() {
        let (p, gain, s, deadline) = (0.1, 2.3e-12, 640.0, 1e-4);
        let b = required_bandwidth(p, gain, N0, s, deadline).unwrap();
        // Scan 10^7 cells over [0, 4 b] for the first grid point meeting the rate.
        let cells = 10_000_000usize;
        let width = 4.0 * b / cells as f64;
        let target = s / deadline;
        let first = (1..=cells)
            .find(|&k| achievable_rate(k as f64 * width, p, gain, N0).unwrap() >= target)
            .unwrap();
        let grid = first as f64 * width;
        assert!((grid - b).abs() <= width, "bisection {b} grid {grid}");
    }

    #[test]
    fn single_fitting_client_is_admitted() {
        let c = [client(0, 1e-10)];
        let plan = linear_search_allocate(&c, &budget(20e6), N0);
        assert_eq!(plan.admitted_count(), 1);
        assert_eq!(plan.entries[0].power, dbm_to_watts(20.0));
    }

    #[test]
    fn zero_budget_admits_nobody() {
        let c = [client(0, 1e-10), client(1, 1e-9)];
        let plan = linear_search_allocate(&c, &budget(0.0), N0);
        assert_eq!(plan.admitted_count(), 0);
        assert!(plan
            .entries
            .iter()
            .all(|a| a.bandwidth == 0.0 && a.power == 0.0));
    }

    #[test]
    fn empty_instances() {
        assert!(linear_search_allocate(&[], &budget(1e6), N0)
            .entries
            .is_empty());
        assert!(brute_force_allocate(&[], &budget(1e6), N0)
            .unwrap()
            .entries
            .is_empty());
    }

    #[test]
    fn individually_infeasible_clients_yield_empty_plan() {
        let c = [client(0, 1e-22), client(1, 1e-23)];
        assert_eq!(
            brute_force_allocate(&c, &budget(20e6), N0)
                .unwrap()
                .admitted_count(),
            0
        );
        assert_eq!(
            linear_search_allocate(&c, &budget(20e6), N0).admitted_count(),
            0
        );
    }

    #[test]
    fn infeasible_client_is_skipped_not_halting() {
        // Client 2 sits between the others in input order but its gain is
        // below the capacity floor, so it gets nothing and the rest are served.
        let c = [client(0, 1e-10), client(2, 1e-22), client(1, 5e-11)];
        let plan = linear_search_allocate(&c, &budget(20e6), N0);
        assert_eq!(plan.admitted_ids(), vec![0, 1]);
    }

    #[test]
    fn equal_gains_break_ties_by_id() {
        let g = 1e-11;
        let need = required_bandwidth(0.1, g, N0, 640.0, 1e-4).unwrap();
        let c = [client(5, g), client(3, g), client(4, g)];
        let plan = linear_search_allocate(&c, &budget(need * 2.0), N0);
        assert_eq!(plan.admitted_ids(), vec![3, 4]);
        let oracle = brute_force_allocate(&c, &budget(need * 2.0), N0).unwrap();
        assert_eq!(oracle.admitted_ids(), vec![3, 4]);
    }

    #[test]
    fn brute_force_size_guard() {
        let c: Vec<_> = (0..17).map(|i| client(i, 1e-10)).collect();
        assert!(matches!(
            brute_force_allocate(&c, &budget(1e6), N0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn uniform_split() {
        let c = [client(0, 1e-10), client(3, 1e-12)];
        let plan = uniform_allocate(&c, &budget(20e6), 10);
        assert!(plan
            .entries
            .iter()
            .all(|a| a.admitted && a.bandwidth == 2e6));
        assert_eq!(plan.bandwidth_used(), 4e6);
    }

    #[test]
    fn budget_validation() {
        assert!(ResourceBudget::new(-1.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(ResourceBudget::new(1.0, 2.0, 1.0, 1.0, 1.0).is_err());
        assert!(ResourceBudget::new(1.0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(ResourceBudget::new(1.0, 0.0, 1.0, 1.0, 0.0).is_err());
    }
}
