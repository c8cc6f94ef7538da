//! Heuristic benchmark allocations: equal downlink power split, full uplink
//! power, CPU frequencies stretched to the deadline.

use crate::comms::{check_async, check_sync, rate_downlink, rate_uplink, Allocation, FeasibilityReport};
use crate::error::Result;
use crate::model::{ChannelInstance, SystemConfig};

/// Heuristic allocation plus its exact-checker verdict.
#[derive(Debug, Clone)]
pub struct HeuristicOutcome {
    pub allocation: Allocation,
    /// False when some UE needed more than `f_max` to meet the deadline (its
    /// frequency was clamped, so the allocation will fail the exact checker).
    pub within_cap: bool,
    /// Verdict of the scheme's exact feasibility checker on the allocation.
    pub report: FeasibilityReport,
}

/// Equal-split powers shared by both heuristics: every UE gets the same
/// downlink fraction `1/K_total` and transmits uplink at full power.
fn equal_power_allocation(ch: &ChannelInstance, cfg: &SystemConfig) -> Allocation {
    let k = ch.ue_count();
    Allocation {
        eta: vec![1.0 / k as f64; k],
        zeta: vec![1.0; k],
        freq: vec![cfg.f_max; k],
    }
}

/// Stretch each UE's frequency so compute exactly fills its remaining time
/// budget, clamping at `f_max`.
fn fill_frequencies(
    alloc: &mut Allocation,
    budgets: &[f64],
    cfg: &SystemConfig,
) -> bool {
    let ue = cfg.ue_params();
    let mut within_cap = true;
    for (i, &budget) in budgets.iter().enumerate() {
        let cycles = ue.total_cycles(cfg.local_rounds, i);
        let f = if budget > 0.0 { cycles / budget } else { f64::INFINITY };
        if f > cfg.f_max * (1.0 + 1e-12) {
            within_cap = false;
        }
        alloc.freq[i] = f.min(cfg.f_max);
    }
    within_cap
}

/// Asynchronous heuristic: equal downlink split, full uplink power, and
/// `f_i = cycles_i / (t_qos - t_d_i - t_u_i)` per UE.
pub fn heuristic_async(ch: &ChannelInstance, cfg: &SystemConfig) -> Result<HeuristicOutcome> {
    let mut alloc = equal_power_allocation(ch, cfg);
    let ue = cfg.ue_params();
    let r_d = rate_downlink(&alloc, ch, cfg)?;
    let r_u = rate_uplink(&alloc, ch, cfg)?;
    let budgets: Vec<f64> = (0..ch.ue_count())
        .map(|i| cfg.t_qos - ue.dl_bits[i] / r_d[i] - ue.ul_bits[i] / r_u[i])
        .collect();
    let within_cap = fill_frequencies(&mut alloc, &budgets, cfg);
    let report = check_async(&alloc, ch, cfg)?;
    Ok(HeuristicOutcome { allocation: alloc, within_cap, report })
}

/// Synchronous heuristic: same powers, but the compute budget is shared,
/// `t_qos - max_j t_d_j - max_j t_u_j`, since stages advance in lockstep.
pub fn heuristic_sync(ch: &ChannelInstance, cfg: &SystemConfig) -> Result<HeuristicOutcome> {
    let mut alloc = equal_power_allocation(ch, cfg);
    let ue = cfg.ue_params();
    let r_d = rate_downlink(&alloc, ch, cfg)?;
    let r_u = rate_uplink(&alloc, ch, cfg)?;
    let k = ch.ue_count();
    let max_t_d =
        (0..k).map(|i| ue.dl_bits[i] / r_d[i]).fold(f64::NEG_INFINITY, f64::max);
    let max_t_u =
        (0..k).map(|i| ue.ul_bits[i] / r_u[i]).fold(f64::NEG_INFINITY, f64::max);
    let budgets = vec![cfg.t_qos - max_t_d - max_t_u; k];
    let within_cap = fill_frequencies(&mut alloc, &budgets, cfg);
    let report = check_sync(&alloc, ch, cfg)?;
    Ok(HeuristicOutcome { allocation: alloc, within_cap, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::{check_async, delays, energies};
    use crate::model::generate_network;
    use approx::assert_relative_eq;

    fn instance(
        antennas: usize,
        groups: usize,
        ues: usize,
        seed: u64,
    ) -> (ChannelInstance, SystemConfig) {
        let cfg = SystemConfig::default_scenario(antennas, groups, ues);
        let ch = generate_network(&cfg, seed).unwrap();
        (ch, cfg)
    }

    #[test]
    fn equal_split_and_full_uplink_power() {
        let (ch, cfg) = instance(100, 3, 10, 3);
        let out = heuristic_async(&ch, &cfg).unwrap();
        for i in 0..30 {
            assert_eq!(out.allocation.eta[i], 1.0 / 30.0);
            assert_eq!(out.allocation.zeta[i], 1.0);
        }
        let total: f64 = out.allocation.eta.iter().sum();
        assert_relative_eq!(total, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn async_frequency_fills_the_per_ue_budget() {
        // A roomy deadline: every UE's frequency formula stays under the cap
        // (the default 5 s deadline clamps cell-edge UEs at this scale).
        let (ch, mut cfg) = instance(100, 3, 10, 3);
        cfg.t_qos = 20.0;
        let out = heuristic_async(&ch, &cfg).unwrap();
        assert!(out.within_cap);
        let times = delays(&out.allocation, &ch, &cfg).unwrap();
        for i in 0..ch.ue_count() {
            // Download + compute + upload lands exactly on the deadline.
            assert_relative_eq!(times.total(i), cfg.t_qos, max_relative = 1e-9);
        }
    }

    #[test]
    fn deadline_boundary_pins_frequency_at_cap() {
        let (ch, mut cfg) = instance(50, 1, 1, 5);
        let probe = heuristic_async(&ch, &cfg).unwrap();
        let times = delays(&probe.allocation, &ch, &cfg).unwrap();
        let ue = cfg.ue_params();
        // Shrink the deadline until the UE needs exactly f_max.
        cfg.t_qos = times.t_d[0]
            + times.t_u[0]
            + ue.total_cycles(cfg.local_rounds, 0) / cfg.f_max;
        let out = heuristic_async(&ch, &cfg).unwrap();
        assert!(out.within_cap);
        assert_relative_eq!(out.allocation.freq[0], cfg.f_max, max_relative = 1e-9);
        assert!(check_async(&out.allocation, &ch, &cfg).unwrap().feasible);
    }

    #[test]
    fn impossible_deadline_clamps_and_flags() {
        let (ch, mut cfg) = instance(50, 1, 2, 5);
        cfg.t_qos = 1e-3;
        let out = heuristic_async(&ch, &cfg).unwrap();
        assert!(!out.within_cap);
        for f in &out.allocation.freq {
            assert_eq!(*f, cfg.f_max);
        }
        assert!(!check_async(&out.allocation, &ch, &cfg).unwrap().feasible);
    }

    #[test]
    fn sync_budget_is_shared_so_frequencies_dominate_async() {
        let (ch, cfg) = instance(100, 3, 10, 11);
        let a = heuristic_async(&ch, &cfg).unwrap();
        let s = heuristic_sync(&ch, &cfg).unwrap();
        for i in 0..ch.ue_count() {
            assert!(s.allocation.freq[i] >= a.allocation.freq[i] * (1.0 - 1e-12));
        }
        // Homogeneous payloads and cycle counts: one shared budget means one
        // shared frequency.
        for w in s.allocation.freq.windows(2) {
            assert_relative_eq!(w[0], w[1], max_relative = 1e-12);
        }
    }

    #[test]
    fn unflagged_outcomes_pass_the_exact_checkers() {
        let mut unflagged = 0;
        for seed in 0..20 {
            let (ch, cfg) = instance(100, 3, 10, seed);
            let a = heuristic_async(&ch, &cfg).unwrap();
            if a.within_cap {
                assert!(a.report.feasible, "async seed {seed}");
                unflagged += 1;
            }
            let s = heuristic_sync(&ch, &cfg).unwrap();
            if s.within_cap {
                assert!(s.report.feasible, "sync seed {seed}");
                unflagged += 1;
            }
        }
        // The property must actually get exercised at this scale.
        assert!(unflagged > 0, "every sampled instance was clamped");
    }

    #[test]
    fn optimizer_beats_the_heuristic_on_a_small_instance() {
        use crate::optimizer::{sca_solve, ScaOptions, Scheme};
        let (ch, cfg) = instance(50, 1, 2, 1);
        let heur = heuristic_async(&ch, &cfg).unwrap();
        assert!(heur.within_cap);
        let heur_energy = energies(&heur.allocation, &ch, &cfg).unwrap().e_total;
        let opts = ScaOptions { restarts: 1, ..ScaOptions::default() };
        let opt = sca_solve(&ch, &cfg, Scheme::Async, &opts).unwrap();
        assert!(
            opt.energy.e_total < heur_energy,
            "optimizer {} vs heuristic {heur_energy}",
            opt.energy.e_total
        );
    }
}
