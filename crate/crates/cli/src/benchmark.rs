//! Replicated comparison of EP against the ADF smoother on simulated data.

use std::path::{Path, PathBuf};

use ctep::RNG_ALGORITHM;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DefaultRecord, Experiment, Method};
use crate::error::{CliError, Result};
use crate::io::fmt_real;
use crate::pipeline::{infer, observe, rmse, simulate_truth};

/// A variance's report fails when more than this fraction of replicates error.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

const METHODS: [Method; 2] = [Method::AdfS, Method::Ep];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub rmse_observations: f64,
    pub rmse_path: f64,
    pub sweeps: usize,
    pub converged: bool,
    /// `None` when the free energy could not be evaluated.
    pub log_evidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub variance: f64,
    pub seed: u64,
    pub adf_s: Option<MethodOutcome>,
    pub ep: Option<MethodOutcome>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn outcome(&self, m: Method) -> Option<&MethodOutcome> {
        match m {
            Method::Ep => self.ep.as_ref(),
            _ => self.adf_s.as_ref(),
        }
    }
}

/// Replicate averages for one (variance, method) pair. Failed replicates
/// are excluded from every average and counted in `failures`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub variance: f64,
    pub method: String,
    pub rmse_observations: f64,
    pub rmse_path: f64,
    pub mean_sweeps: f64,
    pub median_sweeps: f64,
    pub converged_fraction: f64,
    pub replicates: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub replicates: Vec<ReplicateRecord>,
    pub rng_algorithm: String,
    pub non_paper_defaults: Vec<serde_json::Value>,
}

impl BenchmarkReport {
    pub fn row(&self, variance: f64, method: Method) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.variance == variance && r.method == method.name())
    }

    /// Errors if any variance lost more than [`MAX_FAILURE_FRACTION`] of its replicates.
    pub fn check_failures(&self) -> Result<()> {
        for r in self.rows.iter().filter(|r| r.method == Method::Ep.name()) {
            let total = r.replicates + r.failures;
            if r.failures as f64 > MAX_FAILURE_FRACTION * total as f64 {
                return Err(CliError::TooManyFailures {
                    variance: r.variance,
                    failed: r.failures,
                    total,
                });
            }
        }
        Ok(())
    }
}

fn run_replicate(exp: &Experiment, variance: f64, seed: u64) -> ReplicateRecord {
    let attempt = || -> std::result::Result<(MethodOutcome, MethodOutcome), String> {
        let model = exp.obs_model_with_variance(variance).map_err(|e| e.to_string())?;
        let truth = simulate_truth(exp, seed).map_err(|e| format!("simulation: {e}"))?;
        let obs = observe(exp, &truth, &model, seed).map_err(|e| format!("observation: {e}"))?;
        let traj = truth.trajectory();
        let path_nodes: Vec<usize> = (0..exp.grid.n_nodes()).collect();
        let path_truth: Vec<_> = path_nodes.iter().map(|k| traj.state_at(exp.grid.time(*k))).collect();
        let obs_nodes = obs
            .iter()
            .map(|o| exp.grid.snap(o.time))
            .collect::<ctep::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let obs_truth: Vec<_> = obs.iter().map(|o| traj.state_at(o.time)).collect();
        let run = |m: Method| {
            let r = infer(exp, m, &obs, &model).map_err(|e| format!("{}: {e}", m.name()))?;
            Ok::<_, String>(MethodOutcome {
                rmse_observations: rmse(&r.smoothed, &obs_nodes, &obs_truth),
                rmse_path: rmse(&r.smoothed, &path_nodes, &path_truth),
                sweeps: r.sweeps_run,
                converged: r.converged,
                log_evidence: r.log_evidence.is_finite().then_some(r.log_evidence),
            })
        };
        Ok((run(Method::AdfS)?, run(Method::Ep)?))
    };
    match attempt() {
        Ok((a, e)) => ReplicateRecord {
            variance,
            seed,
            adf_s: Some(a),
            ep: Some(e),
            error: None,
        },
        Err(msg) => ReplicateRecord {
            variance,
            seed,
            adf_s: None,
            ep: None,
            error: Some(msg),
        },
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn summarize(variance: f64, method: Method, recs: &[&ReplicateRecord]) -> BenchmarkRow {
    let ok: Vec<&MethodOutcome> = recs.iter().filter_map(|r| r.outcome(method)).collect();
    let n = ok.len();
    let mean = |f: &dyn Fn(&MethodOutcome) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            ok.iter().map(|o| f(o)).sum::<f64>() / n as f64
        }
    };
    BenchmarkRow {
        variance,
        method: method.name().to_string(),
        rmse_observations: mean(&|o| o.rmse_observations),
        rmse_path: mean(&|o| o.rmse_path),
        mean_sweeps: mean(&|o| o.sweeps as f64),
        median_sweeps: median(ok.iter().map(|o| o.sweeps as f64).collect()),
        converged_fraction: mean(&|o| o.converged as u8 as f64),
        replicates: n,
        failures: recs.len() - n,
    }
}

/// Runs every (variance, seed) replicate on a pool of `exp.workers` threads.
/// Results do not depend on the worker count.
pub fn run_benchmark(exp: &Experiment) -> Result<BenchmarkReport> {
    let jobs: Vec<(f64, u64)> = exp
        .variances
        .iter()
        .flat_map(|v| exp.benchmark_seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.workers)
        .build()
        .map_err(|e| CliError::config(format!("workers: {e}")))?;
    let replicates: Vec<ReplicateRecord> =
        pool.install(|| jobs.par_iter().map(|(v, s)| run_replicate(exp, *v, *s)).collect());

    let mut rows = Vec::new();
    for v in &exp.variances {
        let recs: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.variance == *v).collect();
        for m in METHODS {
            rows.push(summarize(*v, m, &recs));
        }
    }
    Ok(BenchmarkReport {
        rows,
        replicates,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        non_paper_defaults: defaults_json(&exp.defaults),
    })
}

pub(crate) fn defaults_json(d: &[DefaultRecord]) -> Vec<serde_json::Value> {
    d.iter().map(|r| serde_json::to_value(r).expect("plain data")).collect()
}

pub const REPORT_CSV_HEADER: [&str; 9] = [
    "variance",
    "method",
    "rmse_observations",
    "rmse_path",
    "mean_sweeps",
    "median_sweeps",
    "converged_fraction",
    "replicates",
    "failures",
];

/// Writes `benchmark.csv` (one row per variance and method) and
/// `benchmark.json` (rows plus every replicate record).
pub fn write_report(dir: &Path, report: &BenchmarkReport) -> Result<(PathBuf, PathBuf)> {
    let csv_path = dir.join("benchmark.csv");
    let json_path = dir.join("benchmark.json");
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| CliError::io(p, e.into())
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(io(&csv_path))?;
    w.write_record(REPORT_CSV_HEADER).map_err(io(&csv_path))?;
    for r in &report.rows {
        w.write_record([
            fmt_real(r.variance),
            r.method.clone(),
            fmt_real(r.rmse_observations),
            fmt_real(r.rmse_path),
            fmt_real(r.mean_sweeps),
            fmt_real(r.median_sweeps),
            fmt_real(r.converged_fraction),
            r.replicates.to_string(),
            r.failures.to_string(),
        ])
        .map_err(io(&csv_path))?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, text).map_err(|e| CliError::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

pub fn read_report(path: &Path) -> Result<BenchmarkReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    fn rec(ep: Option<f64>) -> ReplicateRecord {
        let o = ep.map(|r| MethodOutcome {
            rmse_observations: r,
            rmse_path: r,
            sweeps: 3,
            converged: true,
            log_evidence: None,
        });
        ReplicateRecord {
            variance: 1.0,
            seed: 0,
            adf_s: o.clone(),
            ep: o,
            error: ep.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let recs = [rec(Some(1.0)), rec(Some(3.0)), rec(None)];
        let refs: Vec<_> = recs.iter().collect();
        let row = summarize(1.0, Method::Ep, &refs);
        assert_eq!((row.replicates, row.failures), (2, 1));
        assert_eq!(row.rmse_path, 2.0);
        let report = BenchmarkReport {
            rows: vec![row],
            replicates: recs.to_vec(),
            rng_algorithm: String::new(),
            non_paper_defaults: vec![],
        };
        assert!(matches!(
            report.check_failures(),
            Err(CliError::TooManyFailures {
                failed: 1,
                total: 3,
                ..
            })
        ));
    }
}
