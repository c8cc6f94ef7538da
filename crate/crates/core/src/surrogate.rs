//! SCA building blocks: channel functionals in the square-root power
//! variables, concave quadratic lower bounds on the link rates, and convex
//! quadratic upper bounds on the bilinear epigraph terms.
//!
//! The substitution `eta = v^2`, `zeta = u^2` turns each SINR into a ratio of
//! a squared linear form over a quadratic-plus-noise form. Freezing the log
//! and the ratio denominators at an expansion point yields rate bounds that
//! are quadratic with a diagonal (negative semidefinite) quadratic part, and
//! the bilinear products in the epigraph constraints admit the classic
//! half-square convex majorants. Every bound here is tight at its expansion
//! point, which is what gives the outer SCA loop its descent property.

use crate::error::{Error, Result};
use crate::model::{ChannelInstance, SystemConfig};

/// Precomputed per-UE coefficients of the SINR functionals in the
/// square-root power variables.
///
/// Downlink, for UE `i`: signal amplitude `Upsilon_i(v_i) = dl_amp[i] * v_i`
/// and interference-plus-noise `Pi_i(v) = dl_gap[i] * sum(v^2) + 1`, so that
/// `SINR_d = Upsilon^2 / Pi` with `eta = v^2`. Uplink mirrors this with
/// `Psi_i(u_i) = ul_amp[i] * u_i` and `Xi(u) = sum(ul_gap * u^2) + 1`; the
/// uplink interference functional weighs every interferer by its own
/// estimation gap and is the same value for all UEs.
#[derive(Debug, Clone)]
pub struct AuxFunctionals {
    /// `sqrt((M - K_total) * rho_d * sigma_hat_sq[i])`.
    pub dl_amp: Vec<f64>,
    /// `rho_d * (beta[i] - sigma_hat_sq[i])`.
    pub dl_gap: Vec<f64>,
    /// `sqrt((M - K_total) * rho_u * sigma_bar_sq[i])`.
    pub ul_amp: Vec<f64>,
    /// `rho_u * (beta[i] - sigma_bar_sq[i])`.
    pub ul_gap: Vec<f64>,
    /// Downlink rate prefactor in nats: `B * (tau_c - tau_dp) / (tau_c * ln 2)`.
    pub kappa_dl: f64,
    /// Uplink rate prefactor in nats: `B * (tau_c - tau_up) / (tau_c * ln 2)`.
    pub kappa_ul: f64,
}

impl AuxFunctionals {
    pub fn new(ch: &ChannelInstance, cfg: &SystemConfig) -> Result<Self> {
        let k_total = ch.ue_count();
        if cfg.antennas <= k_total {
            return Err(Error::NotEnoughAntennas { antennas: cfg.antennas, ues: k_total });
        }
        let p = cfg.normalized_powers();
        let array_gain = (cfg.antennas - k_total) as f64;
        Ok(AuxFunctionals {
            dl_amp: ch.sigma_hat_sq.iter().map(|&s| (array_gain * p.rho_d * s).sqrt()).collect(),
            dl_gap: ch
                .beta
                .iter()
                .zip(&ch.sigma_hat_sq)
                .map(|(&b, &s)| p.rho_d * (b - s))
                .collect(),
            ul_amp: ch.sigma_bar_sq.iter().map(|&s| (array_gain * p.rho_u * s).sqrt()).collect(),
            ul_gap: ch
                .beta
                .iter()
                .zip(&ch.sigma_bar_sq)
                .map(|(&b, &s)| p.rho_u * (b - s))
                .collect(),
            kappa_dl: cfg.bandwidth * (cfg.tau_c - cfg.tau_dp) / (cfg.tau_c * std::f64::consts::LN_2),
            kappa_ul: cfg.bandwidth * (cfg.tau_c - cfg.tau_up) / (cfg.tau_c * std::f64::consts::LN_2),
        })
    }

    pub fn ue_count(&self) -> usize {
        self.dl_amp.len()
    }

    /// Downlink interference-plus-noise functional for UE `i`.
    pub fn pi(&self, i: usize, v: &[f64]) -> f64 {
        self.dl_gap[i] * v.iter().map(|x| x * x).sum::<f64>() + 1.0
    }

    /// Downlink signal amplitude functional for UE `i`.
    pub fn upsilon(&self, i: usize, v_i: f64) -> f64 {
        self.dl_amp[i] * v_i
    }

    /// Uplink interference-plus-noise functional (identical for every UE).
    pub fn xi(&self, u: &[f64]) -> f64 {
        u.iter().zip(&self.ul_gap).map(|(x, g)| g * x * x).sum::<f64>() + 1.0
    }

    /// Uplink signal amplitude functional for UE `i`.
    pub fn psi(&self, i: usize, u_i: f64) -> f64 {
        self.ul_amp[i] * u_i
    }

    /// Exact downlink rate (bits/s) of UE `i` in the square-root variables.
    pub fn rate_dl(&self, i: usize, v: &[f64]) -> f64 {
        let ups = self.upsilon(i, v[i]);
        self.kappa_dl * (1.0 + ups * ups / self.pi(i, v)).ln()
    }

    /// Exact uplink rate (bits/s) of UE `i` in the square-root variables.
    pub fn rate_ul(&self, i: usize, u: &[f64]) -> f64 {
        let psi = self.psi(i, u[i]);
        self.kappa_ul * (1.0 + psi * psi / self.xi(u)).ln()
    }
}

/// Previous-iterate values every surrogate is expanded around. `q1`, `q2`,
/// and `q` only exist for the asynchronous scheme; sync iterates leave the
/// vectors empty and `q` at zero.
#[derive(Debug, Clone)]
pub struct ExpansionPoint {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub freq: Vec<f64>,
    pub r_d: Vec<f64>,
    pub r_u: Vec<f64>,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub q: f64,
}

impl ExpansionPoint {
    /// Reject non-finite entries and negative values where signs matter.
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("v", &self.v),
            ("u", &self.u),
            ("f", &self.freq),
            ("r_d", &self.r_d),
            ("r_u", &self.r_u),
            ("omega", &self.omega),
            ("theta", &self.theta),
            ("q1", &self.q1),
            ("q2", &self.q2),
        ];
        for (name, vec) in all {
            if vec.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("expansion point {name} has non-finite entries")));
            }
        }
        if !self.q.is_finite() {
            return Err(Error::InvalidConfig("expansion point q is non-finite".into()));
        }
        for (name, vec) in [
            ("v", &self.v),
            ("u", &self.u),
            ("f", &self.freq),
            ("r_d", &self.r_d),
            ("r_u", &self.r_u),
        ] {
            if vec.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidConfig(format!("expansion point {name} has negative entries")));
            }
        }
        Ok(())
    }
}

/// Concave quadratic lower bound on one UE's rate as a function of the whole
/// square-root power vector:
/// `value(x) = constant + lin * x[ue] + sum_l quad[l] * x[l]^2`,
/// with every `quad[l] <= 0`.
#[derive(Debug, Clone)]
pub struct RateBound {
    pub ue: usize,
    pub constant: f64,
    pub lin: f64,
    pub quad: Vec<f64>,
}

impl RateBound {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.constant
            + self.lin * x[self.ue]
            + x.iter().zip(&self.quad).map(|(xi, q)| q * xi * xi).sum::<f64>()
    }
}

fn rate_bound_at(
    kappa: f64,
    amp: f64,
    gap: f64,
    interferers: Option<&[f64]>,
    point: &[f64],
    ue: usize,
) -> Result<RateBound> {
    if point.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig("rate bound needs a finite expansion point".into()));
    }
    let k = point.len();
    // Interference-plus-noise and signal power at the expansion point. The
    // downlink weighs every term by the target UE's own gap; the uplink uses
    // per-interferer weights.
    let pi_i = match interferers {
        None => gap * point.iter().map(|x| x * x).sum::<f64>() + 1.0,
        Some(w) => point.iter().zip(w).map(|(x, g)| g * x * x).sum::<f64>() + 1.0,
    };
    let ups_i = amp * point[ue];
    let sig_i = ups_i * ups_i;
    let sinr_i = sig_i / pi_i;
    // Coefficient of the frozen-denominator correction term.
    let d = sig_i / (pi_i * (sig_i + pi_i));
    let mut quad: Vec<f64> = match interferers {
        None => vec![-kappa * d * gap; k],
        Some(w) => w.iter().map(|g| -kappa * d * g).collect(),
    };
    quad[ue] -= kappa * d * amp * amp;
    Ok(RateBound {
        ue,
        constant: kappa * ((1.0 + sinr_i).ln() - sinr_i - d),
        lin: kappa * 2.0 * ups_i * amp / pi_i,
        quad,
    })
}

/// Concave lower bound on UE `ue`'s downlink rate, expanded at `point.v`.
pub fn dl_rate_bound(aux: &AuxFunctionals, point: &ExpansionPoint, ue: usize) -> Result<RateBound> {
    rate_bound_at(aux.kappa_dl, aux.dl_amp[ue], aux.dl_gap[ue], None, &point.v, ue)
}

/// Concave lower bound on UE `ue`'s uplink rate, expanded at `point.u`.
pub fn ul_rate_bound(aux: &AuxFunctionals, point: &ExpansionPoint, ue: usize) -> Result<RateBound> {
    rate_bound_at(aux.kappa_ul, aux.ul_amp[ue], aux.ul_gap[ue], Some(&aux.ul_gap), &point.u, ue)
}

/// Convex quadratic upper bound on `x^2 - y*z` for nonnegative `y, z`, built
/// from the identity `y*z = 0.25[(y+z)^2 - (y-z)^2]` with the concave square
/// linearized at `y_i + z_i`:
/// `value = x^2 + 0.25[(y-z)^2 - 2(y_i+z_i)(y+z) + (y_i+z_i)^2]`.
///
/// Local variable order for the coefficient views is `[x, y, z]`.
#[derive(Debug, Clone, Copy)]
pub struct PairSquareBound {
    /// `y_i + z_i` at the expansion point.
    pub sum_i: f64,
}

impl PairSquareBound {
    pub fn new(y_i: f64, z_i: f64) -> Self {
        PairSquareBound { sum_i: y_i + z_i }
    }

    pub fn value(&self, x: f64, y: f64, z: f64) -> f64 {
        x * x + 0.25 * ((y - z) * (y - z) - 2.0 * self.sum_i * (y + z) + self.sum_i * self.sum_i)
    }

    /// Symmetric quadratic-form matrix over `[x, y, z]`; PSD with eigenvalues
    /// `{1, 1/2, 0}`.
    pub fn quad(&self) -> [[f64; 3]; 3] {
        [[1.0, 0.0, 0.0], [0.0, 0.25, -0.25], [0.0, -0.25, 0.25]]
    }

    pub fn lin(&self) -> [f64; 3] {
        [0.0, -0.5 * self.sum_i, -0.5 * self.sum_i]
    }

    pub fn constant(&self) -> f64 {
        0.25 * self.sum_i * self.sum_i
    }
}

/// Convex quadratic upper bound on `y*z - offset`, from
/// `y*z = 0.25[(y+z)^2 - (y-z)^2]` with the concave negated square
/// linearized at `y_i - z_i`:
/// `value = 0.25[(y+z)^2 - 2(y_i-z_i)(y-z) + (y_i-z_i)^2 - 4*offset]`.
///
/// Local variable order for the coefficient views is `[y, z]`.
#[derive(Debug, Clone, Copy)]
pub struct ProductBound {
    /// `y_i - z_i` at the expansion point.
    pub diff_i: f64,
    /// Constant subtracted from the product (a payload or cycle count).
    pub offset: f64,
}

impl ProductBound {
    pub fn new(y_i: f64, z_i: f64, offset: f64) -> Self {
        ProductBound { diff_i: y_i - z_i, offset }
    }

    pub fn value(&self, y: f64, z: f64) -> f64 {
        0.25 * ((y + z) * (y + z) - 2.0 * self.diff_i * (y - z) + self.diff_i * self.diff_i
            - 4.0 * self.offset)
    }

    /// Symmetric quadratic-form matrix over `[y, z]`; PSD with eigenvalues
    /// `{1/2, 0}`.
    pub fn quad(&self) -> [[f64; 2]; 2] {
        [[0.25, 0.25], [0.25, 0.25]]
    }

    pub fn lin(&self) -> [f64; 2] {
        [-0.5 * self.diff_i, 0.5 * self.diff_i]
    }

    pub fn constant(&self) -> f64 {
        0.25 * self.diff_i * self.diff_i - self.offset
    }
}

/// Upper bound on `v^2 - r_d * omega` for UE `ue` (downlink energy epigraph).
pub fn h1_bound(point: &ExpansionPoint, ue: usize) -> PairSquareBound {
    PairSquareBound::new(point.r_d[ue], point.omega[ue])
}

/// Upper bound on `u^2 - r_u * theta` for UE `ue` (uplink energy epigraph).
pub fn h2_bound(point: &ExpansionPoint, ue: usize) -> PairSquareBound {
    PairSquareBound::new(point.r_u[ue], point.theta[ue])
}

/// Upper bound on `q1 * r_d - dl_bits` for UE `ue` (download-span cap).
pub fn h3_bound(point: &ExpansionPoint, ue: usize, dl_bits: f64) -> ProductBound {
    ProductBound::new(point.q1[ue], point.r_d[ue], dl_bits)
}

/// Upper bound on `q2 * f - total_cycles` for UE `ue` (compute-span cap).
pub fn h4_bound(point: &ExpansionPoint, ue: usize, total_cycles: f64) -> ProductBound {
    ProductBound::new(point.q2[ue], point.freq[ue], total_cycles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::{rate_downlink, rate_uplink, Allocation};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_instance() -> (ChannelInstance, SystemConfig) {
        let mut cfg = SystemConfig::default_scenario(50, 1, 2);
        cfg.tau_dp = 2.0;
        cfg.tau_up = 2.0;
        let beta = vec![4e-11, 8e-12];
        let rho_p = cfg.normalized_powers().rho_p;
        let ch = ChannelInstance {
            positions: vec![[0.05, 0.0], [0.0, 0.1]],
            sigma_hat_sq: beta.iter().map(|&b| crate::model::mmse_variance(b, 2.0, rho_p)).collect(),
            sigma_bar_sq: beta.iter().map(|&b| crate::model::mmse_variance(b, 2.0, rho_p)).collect(),
            beta,
        };
        (ch, cfg)
    }

    fn point_at(v: Vec<f64>, u: Vec<f64>) -> ExpansionPoint {
        let k = v.len();
        ExpansionPoint {
            v,
            u,
            freq: vec![1e9; k],
            r_d: vec![1e8; k],
            r_u: vec![1e8; k],
            omega: vec![1e-9; k],
            theta: vec![1e-8; k],
            q1: vec![1.0; k],
            q2: vec![1.0; k],
            q: 1.0,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (ChannelInstance, SystemConfig) {
        let groups = rng.gen_range(1..=3usize);
        let ues = rng.gen_range(1..=4usize);
        let cfg = SystemConfig::default_scenario(groups * ues + rng.gen_range(10..=60), groups, ues);
        let ch = crate::model::generate_network(&cfg, rng.gen()).unwrap();
        (ch, cfg)
    }

    #[test]
    fn substitution_reproduces_comms_sinrs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (ch, cfg) = random_instance(&mut rng);
            let aux = AuxFunctionals::new(&ch, &cfg).unwrap();
            let k = ch.ue_count();
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..(1.0 / k as f64).sqrt())).collect();
            let u: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0f64)).collect();
            let alloc = Allocation {
                eta: v.iter().map(|x| x * x).collect(),
                zeta: u.iter().map(|x| x * x).collect(),
                freq: vec![1e9; k],
            };
            let sd = crate::comms::sinr_downlink(&alloc, &ch, &cfg).unwrap();
            let su = crate::comms::sinr_uplink(&alloc, &ch, &cfg).unwrap();
            for i in 0..k {
                let ups = aux.upsilon(i, v[i]);
                let psi = aux.psi(i, u[i]);
                assert_relative_eq!(ups * ups / aux.pi(i, &v), sd[i], max_relative = 1e-12);
                assert_relative_eq!(psi * psi / aux.xi(&u), su[i], max_relative = 1e-12);
                assert!(aux.pi(i, &v) >= 1.0);
            }
            assert!(aux.xi(&u) >= 1.0);
        }
    }

    #[test]
    fn rate_bounds_tight_at_expansion_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (ch, cfg) = random_instance(&mut rng);
            let aux = AuxFunctionals::new(&ch, &cfg).unwrap();
            let k = ch.ue_count();
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..(1.0 / k as f64).sqrt())).collect();
            let u: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0f64)).collect();
            let point = point_at(v.clone(), u.clone());
            let alloc = Allocation {
                eta: v.iter().map(|x| x * x).collect(),
                zeta: u.iter().map(|x| x * x).collect(),
                freq: vec![1e9; k],
            };
            let rd = rate_downlink(&alloc, &ch, &cfg).unwrap();
            let ru = rate_uplink(&alloc, &ch, &cfg).unwrap();
            for i in 0..k {
                let bd = dl_rate_bound(&aux, &point, i).unwrap();
                let bu = ul_rate_bound(&aux, &point, i).unwrap();
                assert_relative_eq!(bd.value(&v), rd[i], max_relative = 1e-9);
                assert_relative_eq!(bu.value(&u), ru[i], max_relative = 1e-9);
                // Quadratic part is diagonal and nonpositive.
                assert!(bd.quad.iter().all(|&q| q <= 0.0));
                assert!(bu.quad.iter().all(|&q| q <= 0.0));
            }
        }
    }

    #[test]
    fn rate_bounds_dominated_by_exact_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut checked = 0usize;
        while checked < 1000 {
            let (ch, cfg) = random_instance(&mut rng);
            let aux = AuxFunctionals::new(&ch, &cfg).unwrap();
            let k = ch.ue_count();
            let vi: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..(1.0 / k as f64).sqrt())).collect();
            let ui: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0f64)).collect();
            let point = point_at(vi.clone(), ui.clone());
            for _ in 0..25 {
                // Perturb around and away from the point, staying in range.
                let v: Vec<f64> = vi
                    .iter()
                    .map(|x| (x * rng.gen_range(0.2..1.8) + rng.gen_range(-0.01..0.01)).max(0.0))
                    .collect();
                let u: Vec<f64> = ui
                    .iter()
                    .map(|x| (x * rng.gen_range(0.2..1.8)).min(1.0))
                    .collect();
                let alloc = Allocation {
                    eta: v.iter().map(|x| x * x).collect(),
                    zeta: u.iter().map(|x| x * x).collect(),
                    freq: vec![1e9; k],
                };
                let rd = rate_downlink(&alloc, &ch, &cfg).unwrap();
                let ru = rate_uplink(&alloc, &ch, &cfg).unwrap();
                for i in 0..k {
                    let bd = dl_rate_bound(&aux, &point, i).unwrap().value(&v);
                    let bu = ul_rate_bound(&aux, &point, i).unwrap().value(&u);
                    assert!(
                        bd <= rd[i] + 1e-9 * rd[i].abs().max(1.0),
                        "downlink bound {bd} above exact {}",
                        rd[i]
                    );
                    assert!(
                        bu <= ru[i] + 1e-9 * ru[i].abs().max(1.0),
                        "uplink bound {bu} above exact {}",
                        ru[i]
                    );
                }
                checked += 1;
            }
        }
    }

    #[test]
    fn rate_bound_frozen_spot_values() {
        // Independently evaluated on the two-UE toy instance.
        let (ch, cfg) = toy_instance();
        let aux = AuxFunctionals::new(&ch, &cfg).unwrap();
        let point = point_at(vec![0.5, 0.4], vec![0.8, 0.6]);
        let zero = vec![0.0, 0.0];
        assert_relative_eq!(
            dl_rate_bound(&aux, &point, 0).unwrap().value(&zero),
            -17955564559.17344,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            dl_rate_bound(&aux, &point, 1).unwrap().value(&zero),
            -2150784760.506494,
            max_relative = 1e-12
        );
        let u_eval = vec![0.1, 0.2];
        assert_relative_eq!(
            ul_rate_bound(&aux, &point, 0).unwrap().value(&u_eval),
            -5481027933.231909,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            ul_rate_bound(&aux, &point, 1).unwrap().value(&u_eval),
            -241683597.07267448,
            max_relative = 1e-12
        );
    }

    #[test]
    fn rate_bound_rejects_non_finite_point() {
        let (ch, cfg) = toy_instance();
        let aux = AuxFunctionals::new(&ch, &cfg).unwrap();
        let mut point = point_at(vec![0.5, 0.4], vec![0.8, 0.6]);
        point.v[1] = f64::NAN;
        assert!(dl_rate_bound(&aux, &point, 0).is_err());
        point.v[1] = 0.4;
        point.u[0] = f64::INFINITY;
        assert!(ul_rate_bound(&aux, &point, 0).is_err());
        assert!(point.validate().is_err());
    }

    #[test]
    fn pair_square_bound_tight_dominant_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let y_i = rng.gen_range(1e-6..10.0);
            let z_i = rng.gen_range(1e-6..10.0);
            let b = PairSquareBound::new(y_i, z_i);
            let x_i = rng.gen_range(0.0..3.0);
            // Tight at the expansion point.
            assert_relative_eq!(
                b.value(x_i, y_i, z_i),
                x_i * x_i - y_i * z_i,
                max_relative = 1e-9,
                epsilon = 1e-12
            );
            // Dominates the exact expression everywhere sampled.
            let (x, y, z) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let exact = x * x - y * z;
            assert!(b.value(x, y, z) >= exact - 1e-9 * exact.abs().max(1.0));
            // Coefficient view agrees with the direct evaluation.
            let (q, l, c) = (b.quad(), b.lin(), b.constant());
            let locals = [x, y, z];
            let mut from_coeffs = c;
            for a in 0..3 {
                from_coeffs += l[a] * locals[a];
                for bb in 0..3 {
                    from_coeffs += q[a][bb] * locals[a] * locals[bb];
                }
            }
            assert_relative_eq!(from_coeffs, b.value(x, y, z), max_relative = 1e-9, epsilon = 1e-12);
        }
        // PSD: eigenvalues of the y/z block are {0.5, 0}; x block is 1.
        let m = nalgebra::Matrix3::from_fn(|r, c| PairSquareBound::new(1.0, 2.0).quad()[r][c]);
        let eig = m.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-12));
    }

    #[test]
    fn product_bound_tight_dominant_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let y_i = rng.gen_range(1e-6..10.0);
            let z_i = rng.gen_range(1e-6..10.0);
            let offset = rng.gen_range(0.0..5.0);
            let b = ProductBound::new(y_i, z_i, offset);
            assert_relative_eq!(
                b.value(y_i, z_i),
                y_i * z_i - offset,
                max_relative = 1e-9,
                epsilon = 1e-12
            );
            let (y, z) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let exact = y * z - offset;
            assert!(b.value(y, z) >= exact - 1e-9 * exact.abs().max(1.0));
            let (q, l, c) = (b.quad(), b.lin(), b.constant());
            let locals = [y, z];
            let mut from_coeffs = c;
            for a in 0..2 {
                from_coeffs += l[a] * locals[a];
                for bb in 0..2 {
                    from_coeffs += q[a][bb] * locals[a] * locals[bb];
                }
            }
            assert_relative_eq!(from_coeffs, b.value(y, z), max_relative = 1e-9, epsilon = 1e-12);
        }
        let m = nalgebra::Matrix2::from_fn(|r, c| ProductBound::new(1.0, 2.0, 0.5).quad()[r][c]);
        assert!(m.symmetric_eigenvalues().iter().all(|&e| e >= -1e-12));
    }

    #[test]
    fn h_bound_frozen_spot_values() {
        // h1 with r = omega: the squared-difference term vanishes.
        let b1 = PairSquareBound::new(2.0, 0.5);
        assert_relative_eq!(b1.value(0.3, 1.2, 1.2), -1.3475, max_relative = 1e-12);
        // Same value from the reduced form v^2 - (r_i+w_i)*r + 0.25(r_i+w_i)^2.
        let reduced = 0.3f64 * 0.3 - 2.5 * 1.2 + 0.25 * 2.5 * 2.5;
        assert_relative_eq!(b1.value(0.3, 1.2, 1.2), reduced, max_relative = 1e-12);

        let b3 = ProductBound::new(0.5, 3.0, 1.5);
        assert_relative_eq!(b3.value(0.7, 2.0), 0.26, max_relative = 1e-12);
        let b4 = ProductBound::new(1.0, 2.5, 2.0);
        assert_relative_eq!(b4.value(0.8, 3.1), 0.64, max_relative = 1e-12);
    }

    #[test]
    fn point_bound_constructors_pull_the_right_entries() {
        let point = ExpansionPoint {
            v: vec![0.1, 0.2],
            u: vec![0.3, 0.4],
            freq: vec![1e9, 2e9],
            r_d: vec![1e8, 2e8],
            r_u: vec![3e8, 4e8],
            omega: vec![1e-10, 2e-10],
            theta: vec![3e-10, 4e-10],
            q1: vec![0.5, 0.6],
            q2: vec![0.7, 0.8],
            q: 1.0,
        };
        assert_eq!(h1_bound(&point, 1).sum_i, 2e8 + 2e-10);
        assert_eq!(h2_bound(&point, 0).sum_i, 3e8 + 3e-10);
        let b3 = h3_bound(&point, 1, 1.6e8);
        assert_eq!(b3.diff_i, 0.6 - 2e8);
        assert_eq!(b3.offset, 1.6e8);
        let b4 = h4_bound(&point, 0, 5e9);
        assert_eq!(b4.diff_i, 0.7 - 1e9);
        assert_eq!(b4.offset, 5e9);
    }
}
