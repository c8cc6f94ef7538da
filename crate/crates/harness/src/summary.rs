//! Aggregate statistics over result files.

use std::collections::BTreeMap;

use crate::{HarnessError, Result};

/// Mean energy of one (scheme, sweep point) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub scheme: String,
    pub m: usize,
    pub k: usize,
    /// Rows with a finite total energy.
    pub n_trials: usize,
    pub mean_energy: f64,
    /// Standard error of the mean (0 when a single trial).
    pub std_err: f64,
}

/// Paired energy reduction of an optimizer run against its heuristic twin.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionStats {
    pub opt_scheme: String,
    pub baseline_scheme: String,
    pub m: usize,
    pub k: usize,
    /// Trials where both rows carry finite energies.
    pub n_pairs: usize,
    /// Mean of `(baseline - opt) / baseline`, percent.
    pub mean_reduction_pct: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub groups: Vec<GroupStats>,
    pub reductions: Vec<ReductionStats>,
}

/// The scheme pairs that share a trial seed and therefore compare directly.
const PAIRINGS: [(&str, &str); 2] =
    [("opt_async", "heur_async"), ("opt_sync", "heur_sync")];

struct ParsedRow {
    trial: usize,
    scheme: String,
    m: usize,
    k: usize,
    e_total: f64,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| HarnessError::Config(format!("results file lacks a `{name}` column")))
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T> {
    record
        .get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| HarnessError::Config(format!("line {line}: bad `{name}` field")))
}

/// Compute per-group means and paired reductions from a results CSV.
pub fn summarize<R: std::io::Read>(reader: R) -> Result<Summary> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let c_trial = column(&headers, "trial")?;
    let c_scheme = column(&headers, "scheme")?;
    let c_m = column(&headers, "M")?;
    let c_k = column(&headers, "K")?;
    let c_e = column(&headers, "E_total")?;

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = rows.len() as u64 + 2;
        rows.push(ParsedRow {
            trial: parse_field(&record, c_trial, "trial", line)?,
            scheme: record
                .get(c_scheme)
                .ok_or_else(|| HarnessError::Config(format!("line {line}: bad `scheme` field")))?
                .to_string(),
            m: parse_field(&record, c_m, "M", line)?,
            k: parse_field(&record, c_k, "K", line)?,
            e_total: parse_field(&record, c_e, "E_total", line)?,
        });
    }

    // Group means. BTreeMap keys keep the output deterministic.
    let mut cells: BTreeMap<(usize, usize, String), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        cells
            .entry((row.m, row.k, row.scheme.clone()))
            .or_default()
            .push(row.e_total);
    }
    let groups = cells
        .into_iter()
        .map(|((m, k, scheme), energies)| {
            let finite: Vec<f64> = energies.into_iter().filter(|e| e.is_finite()).collect();
            let n = finite.len();
            let mean = if n == 0 { f64::NAN } else { finite.iter().sum::<f64>() / n as f64 };
            let std_err = if n > 1 {
                let var =
                    finite.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            GroupStats { scheme, m, k, n_trials: n, mean_energy: mean, std_err }
        })
        .collect();

    // Paired reductions: index energies by (m, k, scheme, trial).
    let mut by_key: BTreeMap<(usize, usize, &str, usize), f64> = BTreeMap::new();
    for row in &rows {
        by_key.insert((row.m, row.k, row.scheme.as_str(), row.trial), row.e_total);
    }
    let sweep_points: Vec<(usize, usize)> = {
        let mut pts: Vec<_> = rows.iter().map(|r| (r.m, r.k)).collect();
        pts.sort_unstable();
        pts.dedup();
        pts
    };
    let trials: Vec<usize> = {
        let mut ts: Vec<_> = rows.iter().map(|r| r.trial).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    };
    let mut reductions = Vec::new();
    for &(m, k) in &sweep_points {
        for (opt, base) in PAIRINGS {
            let mut cuts = Vec::new();
            for &t in &trials {
                let (Some(&o), Some(&b)) =
                    (by_key.get(&(m, k, opt, t)), by_key.get(&(m, k, base, t)))
                else {
                    continue;
                };
                if o.is_finite() && b.is_finite() && b != 0.0 {
                    cuts.push((b - o) / b * 100.0);
                }
            }
            if !cuts.is_empty() {
                reductions.push(ReductionStats {
                    opt_scheme: opt.to_string(),
                    baseline_scheme: base.to_string(),
                    m,
                    k,
                    n_pairs: cuts.len(),
                    mean_reduction_pct: cuts.iter().sum::<f64>() / cuts.len() as f64,
                });
            }
        }
    }
    Ok(Summary { groups, reductions })
}

impl Summary {
    /// Plain-text tables for the command line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>5} {:>4} {:>7} {:>14} {:>12}\n",
            "scheme", "M", "K", "trials", "mean E [J]", "std err"
        ));
        for g in &self.groups {
            out.push_str(&format!(
                "{:<12} {:>5} {:>4} {:>7} {:>14.6e} {:>12.3e}\n",
                g.scheme, g.m, g.k, g.n_trials, g.mean_energy, g.std_err
            ));
        }
        if !self.reductions.is_empty() {
            out.push_str("\npaired energy reduction vs the matching heuristic\n");
            out.push_str(&format!(
                "{:<24} {:>5} {:>4} {:>7} {:>10}\n",
                "comparison", "M", "K", "pairs", "mean"
            ));
            for r in &self.reductions {
                out.push_str(&format!(
                    "{:<24} {:>5} {:>4} {:>7} {:>9.2}%\n",
                    format!("{} vs {}", r.opt_scheme, r.baseline_scheme),
                    r.m,
                    r.k,
                    r.n_pairs,
                    r.mean_reduction_pct
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{write_csv, ResultRow, RunScheme};
    use approx::assert_relative_eq;

    fn row(trial: usize, scheme: RunScheme, m: usize, e_total: f64) -> ResultRow {
        ResultRow {
            trial,
            seed: 42,
            scheme,
            m,
            n: 1,
            k: 2,
            e_total,
            e_d: e_total / 3.0,
            sum_e_c: e_total / 3.0,
            sum_e_u: e_total / 3.0,
            sca_iterations: 5,
            status: "converged".into(),
            wall_time: 0.0,
        }
    }

    fn summarize_rows(rows: &[ResultRow]) -> Summary {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf).unwrap();
        summarize(buf.as_slice()).unwrap()
    }

    #[test]
    fn identical_columns_reduce_by_zero() {
        let rows = vec![
            row(0, RunScheme::OptAsync, 100, 4.0),
            row(0, RunScheme::HeurAsync, 100, 4.0),
            row(1, RunScheme::OptAsync, 100, 6.0),
            row(1, RunScheme::HeurAsync, 100, 6.0),
        ];
        let s = summarize_rows(&rows);
        assert_eq!(s.reductions.len(), 1);
        assert_eq!(s.reductions[0].n_pairs, 2);
        assert_relative_eq!(s.reductions[0].mean_reduction_pct, 0.0);
        let opt = s.groups.iter().find(|g| g.scheme == "opt_async").unwrap();
        assert_relative_eq!(opt.mean_energy, 5.0);
        assert_relative_eq!(opt.std_err, 1.0); // std sqrt(2), n 2
    }

    #[test]
    fn halved_energies_reduce_by_fifty_percent() {
        let rows = vec![
            row(0, RunScheme::HeurSync, 100, 8.0),
            row(0, RunScheme::OptSync, 100, 4.0),
            row(1, RunScheme::HeurSync, 100, 2.0),
            row(1, RunScheme::OptSync, 100, 1.0),
        ];
        let s = summarize_rows(&rows);
        let r = &s.reductions[0];
        assert_eq!(r.opt_scheme, "opt_sync");
        assert_eq!(r.baseline_scheme, "heur_sync");
        assert_relative_eq!(r.mean_reduction_pct, 50.0);
    }

    #[test]
    fn nan_rows_drop_out_of_pairs_and_means() {
        let rows = vec![
            row(0, RunScheme::OptAsync, 100, f64::NAN),
            row(0, RunScheme::HeurAsync, 100, 4.0),
            row(1, RunScheme::OptAsync, 100, 3.0),
            row(1, RunScheme::HeurAsync, 100, 6.0),
        ];
        let s = summarize_rows(&rows);
        assert_eq!(s.reductions[0].n_pairs, 1);
        assert_relative_eq!(s.reductions[0].mean_reduction_pct, 50.0);
        let opt = s.groups.iter().find(|g| g.scheme == "opt_async").unwrap();
        assert_eq!(opt.n_trials, 1);
        assert_relative_eq!(opt.mean_energy, 3.0);
    }

    #[test]
    fn sweep_points_stay_separate() {
        let rows = vec![
            row(0, RunScheme::OptAsync, 50, 9.0),
            row(0, RunScheme::OptAsync, 150, 3.0),
        ];
        let s = summarize_rows(&rows);
        assert_eq!(s.groups.len(), 2);
        assert_eq!(s.groups[0].m, 50);
        assert_relative_eq!(s.groups[0].mean_energy, 9.0);
        assert_eq!(s.groups[1].m, 150);
        assert_relative_eq!(s.groups[1].mean_energy, 3.0);
        let text = s.render();
        assert!(text.contains("opt_async"));
    }

    #[test]
    fn missing_column_is_a_config_error() {
        let csv = "trial,scheme\n0,opt_async\n";
        match summarize(csv.as_bytes()) {
            Err(HarnessError::Config(msg)) => assert!(msg.contains("E_total") || msg.contains('M')),
            other => panic!("expected a config error, got {other:?}"),
        }
    }
}
