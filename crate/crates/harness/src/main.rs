//! Command-line front end: run experiments, grid-search tiny instances,
//! summarize result files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedmimo::optimizer::Scheme;
use fedmimo::{generate_network, SystemConfig};
use fedmimo_harness::{
    grid_oracle, run_experiment, summarize, ExperimentSpec, HarnessError, RunScheme, Sweep,
};

#[derive(Parser)]
#[command(name = "fedmimo", version, about = "Energy-minimal federated learning over massive MIMO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded Monte Carlo experiment and write one CSV row per
    /// (trial, sweep value, scheme).
    Run {
        /// System config, JSON.
        #[arg(long)]
        config: PathBuf,
        /// Sweep axis: `m=50:150:25` (antennas) or `k=2:10:2` (UEs per
        /// group). Ranges are inclusive; comma lists also work.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Master seed; trial seeds derive from it.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma list drawn from opt_async, opt_sync, heur_async, heur_sync.
        #[arg(long, default_value = "opt_async,opt_sync,heur_async,heur_sync")]
        schemes: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Record wall-clock times (makes the CSV non-reproducible).
        #[arg(long)]
        timings: bool,
        /// Override the optimizer's outer-iteration cap.
        #[arg(long)]
        outer: Option<usize>,
        /// Override the optimizer's relative-decrease stopping threshold.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Override the number of optimizer starts per trial.
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Exhaustively grid-search a tiny instance (at most 2 UEs total).
    Oracle {
        /// System config, JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// `async` or `sync`.
        #[arg(long, default_value = "async")]
        scheme: String,
    },
    /// Print mean energies and paired reductions for a results file.
    Summarize {
        /// Results CSV produced by `run`.
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, HarnessError> {
    let bad = || HarnessError::Config(format!("bad sweep values `{text}`"));
    if let Some((start, rest)) = text.split_once(':') {
        let (stop, step) = rest.split_once(':').ok_or_else(bad)?;
        let start: usize = start.parse().map_err(|_| bad())?;
        let stop: usize = stop.parse().map_err(|_| bad())?;
        let step: usize = step.parse().map_err(|_| bad())?;
        if step == 0 || stop < start {
            return Err(bad());
        }
        Ok((start..=stop).step_by(step).collect())
    } else {
        text.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
    }
}

fn parse_sweep(text: &str) -> Result<Sweep, HarnessError> {
    let (axis, values) = text
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("sweep `{text}` is not `axis=values`")))?;
    let values = parse_usize_list(values)?;
    match axis.trim() {
        "m" | "M" => Ok(Sweep::Antennas(values)),
        "k" | "K" => Ok(Sweep::UesPerGroup(values)),
        other => Err(HarnessError::Config(format!(
            "unknown sweep axis `{other}` (use `m` or `k`)"
        ))),
    }
}

fn parse_schemes(text: &str) -> Result<Vec<RunScheme>, HarnessError> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            RunScheme::parse(s)
                .ok_or_else(|| HarnessError::Config(format!("unknown scheme `{s}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::Run {
            config,
            sweep,
            trials,
            seed,
            schemes,
            out,
            timings,
            outer,
            epsilon,
            restarts,
        } => {
            let base = SystemConfig::from_json_file(&config)?;
            let mut spec = ExperimentSpec::new(base);
            spec.trials = trials;
            spec.master_seed = seed;
            spec.schemes = parse_schemes(&schemes)?;
            spec.out = Some(out.clone());
            spec.record_timings = timings;
            if let Some(sweep) = sweep {
                spec.sweep = parse_sweep(&sweep)?;
            }
            if let Some(outer) = outer {
                spec.sca.max_outer = outer;
            }
            if let Some(epsilon) = epsilon {
                spec.sca.epsilon = epsilon;
            }
            if let Some(restarts) = restarts {
                spec.sca.restarts = restarts;
            }
            let rows = run_experiment(&spec)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            let failures = rows.iter().filter(|r| r.status == "solver_failure").count();
            if failures > 0 {
                eprintln!("{failures} run(s) ended in a solver failure");
                return Ok(2);
            }
            Ok(0)
        }
        Command::Oracle { config, seed, scheme } => {
            let cfg = SystemConfig::from_json_file(&config)?;
            let scheme = match scheme.as_str() {
                "async" => Scheme::Async,
                "sync" => Scheme::Sync,
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown scheme `{other}` (use `async` or `sync`)"
                    )))
                }
            };
            let ch = generate_network(&cfg, seed)?;
            let res = grid_oracle(&ch, &cfg, scheme)?;
            println!("energy      {:.9e} J", res.energy);
            println!("resolution  {:.3e} (relative)", res.rel_error);
            println!("eta         {:?}", res.allocation.eta);
            println!("zeta        {:?}", res.allocation.zeta);
            println!("freq        {:?}", res.allocation.freq);
            Ok(0)
        }
        Command::Summarize { input } => {
            let file = std::fs::File::open(&input)?;
            let summary = summarize(file)?;
            print!("{}", summary.render());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Usage problems are config errors; `--help`/`--version` are not.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            let code = match &err {
                HarnessError::Core(fedmimo::Error::SolverFailure { .. }) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
