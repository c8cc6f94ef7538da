//! System parameters, network geometry, and channel-estimation statistics.
//!
//! A [`SystemConfig`] describes one deployment: a base station with `M`
//! antennas serving `N` federated-learning groups of `K_n` UEs each over a
//! shared coherence block. [`generate_network`] drops the UEs uniformly in the
//! service area and produces the large-scale fading coefficients plus MMSE
//! channel-estimate variances that every later stage consumes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Pathloss at the 1 km reference distance, dB.
pub const PATHLOSS_INTERCEPT_DB: f64 = -140.6;
/// Log-distance pathloss exponent.
pub const PATHLOSS_EXPONENT: f64 = 3.67;
/// Log-normal shadowing standard deviation, dB.
pub const SHADOWING_STD_DB: f64 = 4.0;
/// UEs are dropped no closer to the base station than this, km.
pub const MIN_UE_DISTANCE_KM: f64 = 0.01;

/// Deployment and protocol parameters for one simulated iteration.
///
/// The JSON representation uses the short field names shown in the
/// `#[serde(rename)]` attributes; see `configs/system_config.schema.json`
/// for units. Per-group vectors may be given as a single scalar in JSON and
/// are broadcast to full length when loaded.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Base-station antenna count.
    #[serde(rename = "M")]
    pub antennas: usize,
    /// Number of FL groups served in parallel.
    #[serde(rename = "N")]
    pub groups: usize,
    /// UEs per group, length `groups`.
    #[serde(rename = "K_n")]
    pub ues_per_group: Vec<usize>,
    /// Channel bandwidth, Hz.
    #[serde(rename = "B")]
    pub bandwidth: f64,
    /// Coherence block length, samples.
    pub tau_c: f64,
    /// Downlink pilot length, samples.
    pub tau_dp: f64,
    /// Uplink pilot length, samples.
    pub tau_up: f64,
    /// Maximum base-station transmit power, W.
    pub p_d: f64,
    /// Maximum UE transmit power, W.
    pub p_u: f64,
    /// Pilot transmit power, W.
    pub p_p: f64,
    /// Noise power over the band, W.
    #[serde(rename = "N0")]
    pub noise_power: f64,
    /// Global-update (downlink) payload per group, bits; length `groups` or 1.
    #[serde(rename = "S_d_n", deserialize_with = "scalar_or_vec")]
    pub dl_bits: Vec<f64>,
    /// Local-update (uplink) payload per group, bits; length `groups` or 1.
    #[serde(rename = "S_u_n", deserialize_with = "scalar_or_vec")]
    pub ul_bits: Vec<f64>,
    /// Local dataset size per group, samples; length `groups` or 1.
    #[serde(rename = "D_n", deserialize_with = "scalar_or_vec")]
    pub dataset: Vec<f64>,
    /// Processing cost per sample, cycles; one entry per UE (flattened
    /// group-major) or a single shared value.
    #[serde(rename = "c_nk", deserialize_with = "scalar_or_vec")]
    pub cycles_per_sample: Vec<f64>,
    /// Local computing rounds per iteration.
    #[serde(rename = "L")]
    pub local_rounds: usize,
    /// Twice the effective switched capacitance (alpha/2 multiplies c*D*f^2), J*s^2/cycle^3.
    pub alpha: f64,
    /// Maximum CPU frequency, cycles/s.
    pub f_max: f64,
    /// Per-iteration deadline, s.
    pub t_qos: f64,
    /// Side length of the square service area, km.
    #[serde(rename = "area_D")]
    pub area_km: f64,
}

fn scalar_or_vec<'de, D>(de: D) -> std::result::Result<Vec<f64>, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match Raw::deserialize(de)? {
        Raw::One(x) => vec![x],
        Raw::Many(v) => v,
    })
}

/// Transmit powers normalized by the noise power.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedPowers {
    pub rho_d: f64,
    pub rho_u: f64,
    pub rho_p: f64,
}

/// Per-UE flattening of the group-indexed parameters, group-major order
/// (group 0's UEs first).
#[derive(Debug, Clone)]
pub struct UeParams {
    /// Group index of each UE.
    pub group: Vec<usize>,
    /// Downlink payload each UE must receive, bits.
    pub dl_bits: Vec<f64>,
    /// Uplink payload each UE must send, bits.
    pub ul_bits: Vec<f64>,
    /// Local dataset size, samples.
    pub dataset: Vec<f64>,
    /// Processing cost, cycles/sample.
    pub cycles: Vec<f64>,
}

impl UeParams {
    /// Total CPU cycles one local round costs UE `i`, times the round count:
    /// `L * D * c`.
    pub fn total_cycles(&self, local_rounds: usize, i: usize) -> f64 {
        local_rounds as f64 * self.dataset[i] * self.cycles[i]
    }
}

impl SystemConfig {
    /// The reference deployment used throughout the experiments: `antennas`
    /// antennas, `groups` equal groups of `ues` UEs, 20 MHz band, 20 MB
    /// payloads, 5 s deadline.
    pub fn default_scenario(antennas: usize, groups: usize, ues: usize) -> Self {
        let k_total = groups * ues;
        SystemConfig {
            antennas,
            groups,
            ues_per_group: vec![ues; groups],
            bandwidth: 20e6,
            tau_c: 200.0,
            tau_dp: k_total as f64,
            tau_up: k_total as f64,
            p_d: 6.0,
            p_u: 0.2,
            p_p: 0.2,
            noise_power: 10f64.powf(-12.2),
            dl_bits: vec![1.6e8; groups],
            ul_bits: vec![1.6e8; groups],
            dataset: vec![5e6; groups],
            cycles_per_sample: vec![20.0; k_total],
            local_rounds: 50,
            alpha: 5e-30,
            f_max: 4e9,
            t_qos: 5.0,
            area_km: 0.25,
        }
    }

    /// Total UE count across groups.
    pub fn total_ues(&self) -> usize {
        self.ues_per_group.iter().sum()
    }

    /// Broadcast any length-1 per-group/per-UE vectors to full length and
    /// validate the result. Call after deserializing.
    pub fn canonicalize(mut self) -> Result<Self> {
        let n = self.groups;
        let k_total: usize = self.ues_per_group.iter().sum();
        for (name, v, want) in [
            ("S_d_n", &mut self.dl_bits, n),
            ("S_u_n", &mut self.ul_bits, n),
            ("D_n", &mut self.dataset, n),
            ("c_nk", &mut self.cycles_per_sample, k_total),
        ] {
            if v.len() == 1 && want > 1 {
                *v = vec![v[0]; want];
            } else if v.len() != want {
                return Err(Error::InvalidConfig(format!(
                    "{name} must have length {want} (or 1), got {}",
                    v.len()
                )));
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Check every structural and physical invariant.
    pub fn validate(&self) -> Result<()> {
        let k_total = self.total_ues();
        if self.groups == 0 || self.ues_per_group.is_empty() {
            return Err(Error::InvalidConfig("need at least one group".into()));
        }
        if self.ues_per_group.len() != self.groups {
            return Err(Error::InvalidConfig(format!(
                "K_n must have length N={}, got {}",
                self.groups,
                self.ues_per_group.len()
            )));
        }
        if self.ues_per_group.contains(&0) {
            return Err(Error::InvalidConfig("every group needs at least one UE".into()));
        }
        if self.antennas < k_total {
            return Err(Error::NotEnoughAntennas { antennas: self.antennas, ues: k_total });
        }
        for (name, x) in [
            ("B", self.bandwidth),
            ("tau_c", self.tau_c),
            ("tau_dp", self.tau_dp),
            ("tau_up", self.tau_up),
            ("p_d", self.p_d),
            ("p_u", self.p_u),
            ("p_p", self.p_p),
            ("N0", self.noise_power),
            ("alpha", self.alpha),
            ("f_max", self.f_max),
            ("t_qos", self.t_qos),
            ("area_D", self.area_km),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and > 0, got {x}")));
            }
        }
        if self.local_rounds == 0 {
            return Err(Error::InvalidConfig("L must be >= 1".into()));
        }
        for (name, v) in [
            ("S_d_n", &self.dl_bits),
            ("S_u_n", &self.ul_bits),
            ("D_n", &self.dataset),
            ("c_nk", &self.cycles_per_sample),
        ] {
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::InvalidConfig(format!("{name} entries must be finite and > 0")));
            }
        }
        // Pilots must cover all UEs (orthogonal sequences) yet leave room for
        // data within the coherence block.
        let k = k_total as f64;
        if self.tau_dp < k || self.tau_up < k {
            return Err(Error::InvalidConfig(format!(
                "pilot lengths must be >= K_total={k_total} (tau_dp={}, tau_up={})",
                self.tau_dp, self.tau_up
            )));
        }
        if self.tau_dp >= self.tau_c || self.tau_up >= self.tau_c {
            return Err(Error::InvalidConfig(format!(
                "pilot lengths must be < tau_c={} (tau_dp={}, tau_up={})",
                self.tau_c, self.tau_dp, self.tau_up
            )));
        }
        if self.area_km / 2.0 <= MIN_UE_DISTANCE_KM {
            return Err(Error::InvalidConfig(format!(
                "area_D={} km leaves no room outside the {} km exclusion disc",
                self.area_km, MIN_UE_DISTANCE_KM
            )));
        }
        Ok(())
    }

    /// Parse and canonicalize a config from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SystemConfig = serde_json::from_str(text)?;
        cfg.canonicalize()
    }

    /// Load a config from a JSON file.
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Transmit powers divided by the noise power.
    pub fn normalized_powers(&self) -> NormalizedPowers {
        NormalizedPowers {
            rho_d: self.p_d / self.noise_power,
            rho_u: self.p_u / self.noise_power,
            rho_p: self.p_p / self.noise_power,
        }
    }

    /// Flatten the group-indexed parameters to one entry per UE.
    pub fn ue_params(&self) -> UeParams {
        let k_total = self.total_ues();
        let mut group = Vec::with_capacity(k_total);
        let mut dl = Vec::with_capacity(k_total);
        let mut ul = Vec::with_capacity(k_total);
        let mut data = Vec::with_capacity(k_total);
        for (g, &k) in self.ues_per_group.iter().enumerate() {
            for _ in 0..k {
                group.push(g);
                dl.push(self.dl_bits[g]);
                ul.push(self.ul_bits[g]);
                data.push(self.dataset[g]);
            }
        }
        UeParams {
            group,
            dl_bits: dl,
            ul_bits: ul,
            dataset: data,
            cycles: self.cycles_per_sample.clone(),
        }
    }

    /// Copy of this config with a different antenna count.
    pub fn with_antennas(&self, antennas: usize) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.antennas = antennas;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy of this config with `ues` UEs in every group. Pilot lengths and
    /// the per-UE cycle costs are rebuilt for the new UE count (pilots track
    /// the total UE count; cycle costs broadcast the first entry).
    pub fn with_ues_per_group(&self, ues: usize) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.ues_per_group = vec![ues; cfg.groups];
        let k_total = cfg.total_ues();
        cfg.tau_dp = k_total as f64;
        cfg.tau_up = k_total as f64;
        cfg.cycles_per_sample = vec![self.cycles_per_sample[0]; k_total];
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One realization of the network: UE positions and large-scale channel
/// statistics, all indexed per UE in group-major order.
#[derive(Debug, Clone)]
pub struct ChannelInstance {
    /// UE coordinates relative to the base station, km.
    pub positions: Vec<[f64; 2]>,
    /// Large-scale fading coefficients (linear scale).
    pub beta: Vec<f64>,
    /// MMSE estimate variance of the downlink pilot phase, per UE.
    pub sigma_hat_sq: Vec<f64>,
    /// MMSE estimate variance of the uplink pilot phase, per UE.
    pub sigma_bar_sq: Vec<f64>,
}

impl ChannelInstance {
    pub fn ue_count(&self) -> usize {
        self.beta.len()
    }
}

/// Log-distance pathloss in dB at `distance_km` (no shadowing).
pub fn pathloss_db(distance_km: f64) -> Result<f64> {
    if !(distance_km.is_finite() && distance_km > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "pathloss needs a positive distance, got {distance_km}"
        )));
    }
    Ok(PATHLOSS_INTERCEPT_DB - 10.0 * PATHLOSS_EXPONENT * distance_km.log10())
}

/// Variance of the MMSE channel estimate for a UE with large-scale fading
/// `beta`, pilot length `tau_p` (samples), and normalized pilot power
/// `rho_p`: `tau_p * rho_p * beta^2 / (tau_p * rho_p * beta + 1)`.
pub fn mmse_variance(beta: f64, tau_p: f64, rho_p: f64) -> f64 {
    let t = tau_p * rho_p * beta;
    t * beta / (t + 1.0)
}

/// Drop the UEs and realize the large-scale channel statistics.
///
/// Deterministic for a given `(config, seed)` pair: positions, shadowing, and
/// derived coefficients are drawn from a counter-based stream seeded by
/// `seed`, in fixed UE order.
pub fn generate_network(cfg: &SystemConfig, seed: u64) -> Result<ChannelInstance> {
    cfg.validate()?;
    let k_total = cfg.total_ues();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shadow = Normal::new(0.0, SHADOWING_STD_DB)
        .map_err(|e| Error::InvalidConfig(format!("shadowing distribution: {e}")))?;
    let half = cfg.area_km / 2.0;
    let powers = cfg.normalized_powers();

    let mut positions = Vec::with_capacity(k_total);
    let mut beta = Vec::with_capacity(k_total);
    let mut sigma_hat_sq = Vec::with_capacity(k_total);
    let mut sigma_bar_sq = Vec::with_capacity(k_total);
    for _ in 0..k_total {
        // Rejection-sample outside the exclusion disc; the disc is tiny
        // relative to the area, so this terminates almost immediately.
        let (x, y) = loop {
            let x = rng.gen_range(-half..half);
            let y = rng.gen_range(-half..half);
            if x.hypot(y) >= MIN_UE_DISTANCE_KM {
                break (x, y);
            }
        };
        let d = x.hypot(y);
        let pl_db = pathloss_db(d)? + shadow.sample(&mut rng);
        let b = 10f64.powf(pl_db / 10.0);
        positions.push([x, y]);
        beta.push(b);
        sigma_hat_sq.push(mmse_variance(b, cfg.tau_dp, powers.rho_p));
        sigma_bar_sq.push(mmse_variance(b, cfg.tau_up, powers.rho_p));
    }
    Ok(ChannelInstance { positions, beta, sigma_hat_sq, sigma_bar_sq })
}
