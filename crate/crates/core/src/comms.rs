//! Closed-form link rates, stage delays, energies, and feasibility checkers.
//!
//! One FL iteration has three stages per UE: download of the global model,
//! local computation, and upload of the local update. Everything here is an
//! exact, closed-form function of an [`Allocation`] and the channel
//! statistics — no surrogates, no solver state — so these routines double as
//! the ground truth the optimizer and the grid oracle are validated against.

use crate::error::{Error, Result};
use crate::model::{ChannelInstance, SystemConfig};

/// Relative tolerance used when a feasibility slack is compared against zero:
/// a constraint counts as satisfied when `slack >= -FEASIBILITY_RTOL * scale`
/// with `scale` the natural magnitude of that constraint family.
pub const FEASIBILITY_RTOL: f64 = 1e-9;

/// One candidate operating point: per-UE power-control coefficients and CPU
/// frequencies, group-major UE order.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// Downlink power fractions; the BS budget requires their sum <= 1.
    pub eta: Vec<f64>,
    /// Uplink power fractions, each in [0, 1].
    pub zeta: Vec<f64>,
    /// CPU frequencies, cycles/s, each in [0, f_max].
    pub freq: Vec<f64>,
}

impl Allocation {
    pub fn ue_count(&self) -> usize {
        self.eta.len()
    }

    fn check_shape(&self, ch: &ChannelInstance) -> Result<()> {
        let k = ch.ue_count();
        if self.eta.len() != k || self.zeta.len() != k || self.freq.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "allocation sized ({}, {}, {}) against {k} UEs",
                self.eta.len(),
                self.zeta.len(),
                self.freq.len()
            )));
        }
        Ok(())
    }
}

/// Stage durations per UE, seconds.
#[derive(Debug, Clone)]
pub struct TimingBreakdown {
    pub t_d: Vec<f64>,
    pub t_c: Vec<f64>,
    pub t_u: Vec<f64>,
}

impl TimingBreakdown {
    /// Download + compute + upload for UE `i`.
    pub fn total(&self, i: usize) -> f64 {
        self.t_d[i] + self.t_c[i] + self.t_u[i]
    }
}

/// Energy split of one iteration, joules.
#[derive(Debug, Clone)]
pub struct EnergyBreakdown {
    /// Base-station downlink transmit energy (all UEs).
    pub e_d: f64,
    /// Per-UE computation energies.
    pub e_c: Vec<f64>,
    /// Per-UE uplink transmit energies.
    pub e_u: Vec<f64>,
    /// `e_d + sum(e_c) + sum(e_u)`.
    pub e_total: f64,
}

impl EnergyBreakdown {
    pub fn sum_e_c(&self) -> f64 {
        self.e_c.iter().sum()
    }

    pub fn sum_e_u(&self) -> f64 {
        self.e_u.iter().sum()
    }
}

/// Feasibility verdict with per-constraint slacks (nonnegative = satisfied).
///
/// `deadline_slacks` holds one entry per UE for the async scheme and a single
/// entry (the stage-sum constraint) for the sync scheme. `mode_switch_slack`
/// is the async-only window constraint `min(t_d + t_C) - max(t_d)`. UEs with
/// zero rate or zero frequency make the verdict infeasible outright and are
/// listed in `degenerate_ues`; their time-based slacks are reported as
/// negative infinity.
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `1 - sum(eta)`.
    pub power_budget_slack: f64,
    /// `min(1 - zeta)`.
    pub zeta_slack: f64,
    /// `min(f_max - f)`.
    pub freq_slack: f64,
    /// Smallest entry across eta, zeta, freq (nonnegativity).
    pub nonneg_slack: f64,
    pub deadline_slacks: Vec<f64>,
    pub mode_switch_slack: Option<f64>,
    pub degenerate_ues: Vec<usize>,
}

/// Per-UE downlink SINR (linear scale) under zero-forcing precoding.
pub fn sinr_downlink(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<Vec<f64>> {
    alloc.check_shape(ch)?;
    let k_total = ch.ue_count();
    if cfg.antennas <= k_total {
        return Err(Error::NotEnoughAntennas { antennas: cfg.antennas, ues: k_total });
    }
    let rho_d = cfg.normalized_powers().rho_d;
    let gain = (cfg.antennas - k_total) as f64 * rho_d;
    let eta_sum: f64 = alloc.eta.iter().sum();
    Ok((0..k_total)
        .map(|i| {
            let interference = rho_d * (ch.beta[i] - ch.sigma_hat_sq[i]) * eta_sum;
            gain * ch.sigma_hat_sq[i] * alloc.eta[i] / (interference + 1.0)
        })
        .collect())
}

/// Per-UE downlink rate, bits/s.
pub fn rate_downlink(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<Vec<f64>> {
    let pre = (cfg.tau_c - cfg.tau_dp) / cfg.tau_c * cfg.bandwidth;
    Ok(sinr_downlink(alloc, ch, cfg)?.into_iter().map(|s| pre * (1.0 + s).log2()).collect())
}

/// Per-UE uplink SINR (linear scale) under zero-forcing detection. Unlike the
/// downlink, each interferer enters the denominator with its own estimation
/// gap `(beta - sigma_bar^2)` weighted by its own power fraction.
pub fn sinr_uplink(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<Vec<f64>> {
    alloc.check_shape(ch)?;
    let k_total = ch.ue_count();
    if cfg.antennas <= k_total {
        return Err(Error::NotEnoughAntennas { antennas: cfg.antennas, ues: k_total });
    }
    let rho_u = cfg.normalized_powers().rho_u;
    let gain = (cfg.antennas - k_total) as f64 * rho_u;
    let interference: f64 = (0..k_total)
        .map(|l| (ch.beta[l] - ch.sigma_bar_sq[l]) * alloc.zeta[l])
        .sum::<f64>()
        * rho_u;
    Ok((0..k_total)
        .map(|i| gain * ch.sigma_bar_sq[i] * alloc.zeta[i] / (interference + 1.0))
        .collect())
}

/// Per-UE uplink rate, bits/s.
pub fn rate_uplink(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<Vec<f64>> {
    let pre = (cfg.tau_c - cfg.tau_up) / cfg.tau_c * cfg.bandwidth;
    Ok(sinr_uplink(alloc, ch, cfg)?.into_iter().map(|s| pre * (1.0 + s).log2()).collect())
}

/// Stage durations. Errors (listing the offenders) if any UE has zero rate on
/// either link or zero frequency, so downstream code never sees infinities.
pub fn delays(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<TimingBreakdown> {
    let r_d = rate_downlink(alloc, ch, cfg)?;
    let r_u = rate_uplink(alloc, ch, cfg)?;
    let ue = cfg.ue_params();
    let bad: Vec<usize> = (0..ch.ue_count())
        .filter(|&i| r_d[i] <= 0.0 || r_u[i] <= 0.0 || alloc.freq[i] <= 0.0)
        .collect();
    if !bad.is_empty() {
        return Err(Error::DegenerateRate { ues: bad });
    }
    let t_d: Vec<f64> = (0..ch.ue_count()).map(|i| ue.dl_bits[i] / r_d[i]).collect();
    let t_c: Vec<f64> = (0..ch.ue_count())
        .map(|i| ue.total_cycles(cfg.local_rounds, i) / alloc.freq[i])
        .collect();
    let t_u: Vec<f64> = (0..ch.ue_count()).map(|i| ue.ul_bits[i] / r_u[i]).collect();
    Ok(TimingBreakdown { t_d, t_c, t_u })
}

/// Energy split of the iteration.
pub fn energies(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<EnergyBreakdown> {
    let times = delays(alloc, ch, cfg)?;
    let ue = cfg.ue_params();
    let k_total = ch.ue_count();
    // rho * N0 collapses back to the physical transmit power.
    let e_d: f64 = (0..k_total).map(|i| cfg.p_d * alloc.eta[i] * times.t_d[i]).sum();
    let e_c: Vec<f64> = (0..k_total)
        .map(|i| {
            cfg.local_rounds as f64 * 0.5 * cfg.alpha * ue.cycles[i] * ue.dataset[i]
                * alloc.freq[i] * alloc.freq[i]
        })
        .collect();
    let e_u: Vec<f64> = (0..k_total).map(|i| cfg.p_u * alloc.zeta[i] * times.t_u[i]).collect();
    let e_total = e_d + e_c.iter().sum::<f64>() + e_u.iter().sum::<f64>();
    Ok(EnergyBreakdown { e_d, e_c, e_u, e_total })
}

fn base_report(alloc: &Allocation, cfg: &SystemConfig) -> FeasibilityReport {
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    FeasibilityReport {
        feasible: false,
        power_budget_slack: 1.0 - alloc.eta.iter().sum::<f64>(),
        zeta_slack: alloc.zeta.iter().map(|z| 1.0 - z).fold(f64::INFINITY, f64::min),
        freq_slack: alloc.freq.iter().map(|f| cfg.f_max - f).fold(f64::INFINITY, f64::min),
        nonneg_slack: min(&alloc.eta).min(min(&alloc.zeta)).min(min(&alloc.freq)),
        deadline_slacks: Vec::new(),
        mode_switch_slack: None,
        degenerate_ues: Vec::new(),
    }
}

fn finish_report(mut rep: FeasibilityReport, cfg: &SystemConfig) -> FeasibilityReport {
    let tol_unit = -FEASIBILITY_RTOL;
    let tol_time = -FEASIBILITY_RTOL * cfg.t_qos;
    let tol_freq = -FEASIBILITY_RTOL * cfg.f_max;
    rep.feasible = rep.degenerate_ues.is_empty()
        && rep.power_budget_slack >= tol_unit
        && rep.zeta_slack >= tol_unit
        && rep.freq_slack >= tol_freq
        && rep.nonneg_slack >= tol_unit.min(tol_freq)
        && rep.deadline_slacks.iter().all(|&s| s >= tol_time)
        && rep.mode_switch_slack.is_none_or(|s| s >= tol_time);
    rep
}

/// Check the asynchronous constraint set: power budgets and bounds, the
/// per-UE deadline `t_d + t_C + t_u <= t_qos`, and the mode-switch window
/// `max(t_d) <= min(t_d + t_C)` (every UE must still be computing when the
/// last download ends, so the link can flip to uplink mode for everyone).
pub fn check_async(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<FeasibilityReport> {
    alloc.check_shape(ch)?;
    let mut rep = base_report(alloc, cfg);
    match delays(alloc, ch, cfg) {
        Ok(times) => {
            rep.deadline_slacks = (0..ch.ue_count()).map(|i| cfg.t_qos - times.total(i)).collect();
            let max_t_d = times.t_d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min_busy = (0..ch.ue_count())
                .map(|i| times.t_d[i] + times.t_c[i])
                .fold(f64::INFINITY, f64::min);
            rep.mode_switch_slack = Some(min_busy - max_t_d);
        }
        Err(Error::DegenerateRate { ues }) => {
            rep.deadline_slacks = vec![f64::NEG_INFINITY; ch.ue_count()];
            rep.mode_switch_slack = Some(f64::NEG_INFINITY);
            rep.degenerate_ues = ues;
        }
        Err(e) => return Err(e),
    }
    Ok(finish_report(rep, cfg))
}

/// Check the synchronous constraint set: power budgets and bounds plus the
/// stage-sum deadline `max(t_d) + max(t_C) + max(t_u) <= t_qos` (hard stage
/// boundaries shared by all UEs).
pub fn check_sync(alloc: &Allocation, ch: &ChannelInstance, cfg: &SystemConfig) -> Result<FeasibilityReport> {
    alloc.check_shape(ch)?;
    let mut rep = base_report(alloc, cfg);
    match delays(alloc, ch, cfg) {
        Ok(times) => {
            let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            rep.deadline_slacks =
                vec![cfg.t_qos - (max(&times.t_d) + max(&times.t_c) + max(&times.t_u))];
        }
        Err(Error::DegenerateRate { ues }) => {
            rep.deadline_slacks = vec![f64::NEG_INFINITY];
            rep.degenerate_ues = ues;
        }
        Err(e) => return Err(e),
    }
    Ok(finish_report(rep, cfg))
}
