//! Seeded Monte Carlo sweeps and deterministic CSV emission.

use std::path::PathBuf;

use fedmimo::baselines::{heuristic_async, heuristic_sync};
use fedmimo::comms::energies;
use fedmimo::optimizer::{sca_solve, ScaOptions, Scheme};
use fedmimo::{generate_network, ChannelInstance, Error as CoreError, SystemConfig};
use rand::RngCore;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;

use crate::{HarnessError, Result};

/// What gets run and recorded for each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunScheme {
    OptAsync,
    OptSync,
    HeurAsync,
    HeurSync,
}

impl RunScheme {
    pub const ALL: [RunScheme; 4] =
        [RunScheme::OptAsync, RunScheme::OptSync, RunScheme::HeurAsync, RunScheme::HeurSync];

    pub fn label(&self) -> &'static str {
        match self {
            RunScheme::OptAsync => "opt_async",
            RunScheme::OptSync => "opt_sync",
            RunScheme::HeurAsync => "heur_async",
            RunScheme::HeurSync => "heur_sync",
        }
    }

    pub fn parse(s: &str) -> Option<RunScheme> {
        RunScheme::ALL.iter().copied().find(|r| r.label() == s)
    }
}

/// Sweep axis of an experiment; `Single` runs the base config as-is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sweep {
    Single,
    Antennas(Vec<usize>),
    UesPerGroup(Vec<usize>),
}

/// One experiment: base scenario, sweep axis, schemes, trial count, seeding.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub base: SystemConfig,
    pub sweep: Sweep,
    pub schemes: Vec<RunScheme>,
    pub trials: usize,
    pub master_seed: u64,
    /// Output CSV path; `None` keeps the rows in memory only.
    pub out: Option<PathBuf>,
    /// Optimizer settings shared by every `opt_*` run (the per-trial seed is
    /// filled in by the runner).
    pub sca: ScaOptions,
    /// Record wall-clock times. Off by default so rerunning an experiment
    /// reproduces the CSV byte-for-byte.
    pub record_timings: bool,
}

/// Optimizer settings for batch experiments: single start and a bounded
/// outer loop, trading the slow convergence tail for throughput.
pub fn experiment_sca_options() -> ScaOptions {
    ScaOptions { epsilon: 1e-3, max_outer: 40, restarts: 1, ..ScaOptions::default() }
}

impl ExperimentSpec {
    /// Defaults mirroring the checked-in scenario: no sweep, all four
    /// schemes, 50 trials.
    pub fn new(base: SystemConfig) -> Self {
        ExperimentSpec {
            base,
            sweep: Sweep::Single,
            schemes: RunScheme::ALL.to_vec(),
            trials: 50,
            master_seed: 1,
            out: None,
            sca: experiment_sca_options(),
            record_timings: false,
        }
    }

    /// The concrete, validated config for every sweep value.
    pub fn expand_sweep(&self) -> Result<Vec<SystemConfig>> {
        match &self.sweep {
            Sweep::Single => {
                self.base.validate()?;
                Ok(vec![self.base.clone()])
            }
            Sweep::Antennas(ms) => {
                if ms.is_empty() {
                    return Err(HarnessError::Config("empty antenna sweep".into()));
                }
                ms.iter().map(|&m| Ok(self.base.with_antennas(m)?)).collect()
            }
            Sweep::UesPerGroup(ks) => {
                if ks.is_empty() {
                    return Err(HarnessError::Config("empty UE sweep".into()));
                }
                // Resizing broadcasts the first cycle cost to every UE, which
                // silently drops heterogeneous entries; refuse instead.
                if self.base.cycles_per_sample.windows(2).any(|w| w[0] != w[1]) {
                    return Err(HarnessError::Config(
                        "per-UE cycle costs differ; cannot sweep the group size".into(),
                    ));
                }
                ks.iter().map(|&k| Ok(self.base.with_ues_per_group(k)?)).collect()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be at least 1".into()));
        }
        if self.schemes.is_empty() {
            return Err(HarnessError::Config("no schemes selected".into()));
        }
        Ok(())
    }
}

/// One CSV data row.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub trial: usize,
    pub seed: u64,
    pub scheme: RunScheme,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub e_total: f64,
    pub e_d: f64,
    pub sum_e_c: f64,
    pub sum_e_u: f64,
    pub sca_iterations: usize,
    pub status: String,
    pub wall_time: f64,
}

pub const CSV_HEADER: [&str; 13] = [
    "trial",
    "seed",
    "scheme",
    "M",
    "N",
    "K",
    "E_total",
    "E_d",
    "sum_E_C",
    "sum_E_u",
    "sca_iterations",
    "status",
    "wall_time",
];

fn fmt_energy(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.9e}")
    }
}

impl ResultRow {
    fn record(&self) -> [String; 13] {
        [
            self.trial.to_string(),
            self.seed.to_string(),
            self.scheme.label().to_string(),
            self.m.to_string(),
            self.n.to_string(),
            self.k.to_string(),
            fmt_energy(self.e_total),
            fmt_energy(self.e_d),
            fmt_energy(self.sum_e_c),
            fmt_energy(self.sum_e_u),
            self.sca_iterations.to_string(),
            self.status.clone(),
            format!("{:.3}", self.wall_time),
        ]
    }
}

/// Per-trial seed: an independently mixed stream of the master seed, so
/// adjacent trials share no RNG structure.
pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial as u64);
    rng.next_u64()
}

fn nan_row(template: &ResultRow, status: &str) -> ResultRow {
    ResultRow {
        e_total: f64::NAN,
        e_d: f64::NAN,
        sum_e_c: f64::NAN,
        sum_e_u: f64::NAN,
        sca_iterations: 0,
        status: status.to_string(),
        ..template.clone()
    }
}

fn run_one(
    spec: &ExperimentSpec,
    cfg: &SystemConfig,
    ch: &ChannelInstance,
    scheme: RunScheme,
    trial: usize,
    seed: u64,
) -> Result<ResultRow> {
    let template = ResultRow {
        trial,
        seed,
        scheme,
        m: cfg.antennas,
        n: cfg.groups,
        k: cfg.ues_per_group[0],
        e_total: f64::NAN,
        e_d: f64::NAN,
        sum_e_c: f64::NAN,
        sum_e_u: f64::NAN,
        sca_iterations: 0,
        status: String::new(),
        wall_time: 0.0,
    };
    let start = std::time::Instant::now();
    let mut row = match scheme {
        RunScheme::OptAsync | RunScheme::OptSync => {
            let dir =
                if scheme == RunScheme::OptAsync { Scheme::Async } else { Scheme::Sync };
            let opts = ScaOptions { seed, ..spec.sca.clone() };
            match sca_solve(ch, cfg, dir, &opts) {
                Ok(res) => ResultRow {
                    e_total: res.energy.e_total,
                    e_d: res.energy.e_d,
                    sum_e_c: res.energy.sum_e_c(),
                    sum_e_u: res.energy.sum_e_u(),
                    sca_iterations: res.iterations,
                    status: res.status.label().to_string(),
                    ..template
                },
                Err(CoreError::InfeasibleStart(_)) => nan_row(&template, "infeasible_start"),
                Err(CoreError::SolverFailure { .. }) => nan_row(&template, "solver_failure"),
                Err(e) => return Err(e.into()),
            }
        }
        RunScheme::HeurAsync | RunScheme::HeurSync => {
            let out = if scheme == RunScheme::HeurAsync {
                heuristic_async(ch, cfg)?
            } else {
                heuristic_sync(ch, cfg)?
            };
            let e = energies(&out.allocation, ch, cfg)?;
            let status = if !out.within_cap {
                "clamped"
            } else if out.report.feasible {
                "ok"
            } else {
                "infeasible"
            };
            ResultRow {
                e_total: e.e_total,
                e_d: e.e_d,
                sum_e_c: e.sum_e_c(),
                sum_e_u: e.sum_e_u(),
                status: status.to_string(),
                ..template
            }
        }
    };
    if spec.record_timings {
        row.wall_time = start.elapsed().as_secs_f64();
    }
    Ok(row)
}

/// Run the whole experiment: one row per (trial, sweep value, scheme), rows
/// in that order, written to `spec.out` when set. Failed optimizer runs are
/// recorded as rows with `nan` energies, never dropped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let configs = spec.expand_sweep()?;

    let tasks: Vec<(usize, &SystemConfig)> = (0..spec.trials)
        .flat_map(|t| configs.iter().map(move |c| (t, c)))
        .collect();
    log::info!(
        "{} trials x {} config(s) x {} scheme(s) = {} rows",
        spec.trials,
        configs.len(),
        spec.schemes.len(),
        tasks.len() * spec.schemes.len()
    );
    let nested: Vec<Result<Vec<ResultRow>>> = tasks
        .par_iter()
        .map(|&(trial, cfg)| {
            let seed = trial_seed(spec.master_seed, trial);
            let ch = generate_network(cfg, seed)?;
            log::debug!("trial {trial} M={} K={} seed {seed:#x}", cfg.antennas, cfg.ues_per_group[0]);
            spec.schemes
                .iter()
                .map(|&scheme| run_one(spec, cfg, &ch, scheme, trial, seed))
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(tasks.len() * spec.schemes.len());
    for group in nested {
        rows.extend(group?);
    }
    if let Some(path) = &spec.out {
        let file = std::fs::File::create(path)?;
        write_csv(&rows, file)?;
    }
    Ok(rows)
}

/// Emit rows in the stable 13-column schema.
pub fn write_csv<W: std::io::Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}
