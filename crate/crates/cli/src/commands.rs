//! The four subcommands. Each takes a resolved [`Experiment`] and writes its
//! artifacts into the experiment's output directory.

use std::path::{Path, PathBuf};

use ctep::{EpConfig, EpResult, PathKind, RNG_ALGORITHM};
use serde::{Deserialize, Serialize};

use crate::benchmark::{defaults_json, run_benchmark, write_report, BenchmarkReport};
use crate::config::{Experiment, Method, Process};
use crate::error::{CliError, Result};
use crate::io::{
    read_observations, write_diffusion_trajectory, write_jump_trajectory, write_marginals, write_observations,
};
use crate::pipeline::{infer, observe, simulate_truth, Truth};

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateOutput {
    pub seed: u64,
    pub trajectory: PathBuf,
    pub observations: PathBuf,
}

/// One trajectory and observation file per seed; file names carry the seed
/// when more than one is configured.
pub fn simulate(exp: &Experiment) -> Result<Vec<SimulateOutput>> {
    ensure_dir(&exp.output)?;
    let tag = |seed: u64, stem: &str| {
        if exp.seeds.len() == 1 {
            exp.output.join(format!("{stem}.csv"))
        } else {
            exp.output.join(format!("{stem}-{seed}.csv"))
        }
    };
    let mut out = Vec::new();
    for &seed in &exp.seeds {
        let truth = simulate_truth(exp, seed).map_err(|e| CliError::core(format!("simulation (seed {seed})"), e))?;
        let obs = observe(exp, &truth, &exp.obs_model, seed)
            .map_err(|e| CliError::core(format!("observation sampling (seed {seed})"), e))?;
        let trajectory = tag(seed, "trajectory");
        let observations = tag(seed, "observations");
        match &truth {
            Truth::Jump(t) => write_jump_trajectory(&trajectory, t)?,
            Truth::Diffusion(t) => write_diffusion_trajectory(&trajectory, t)?,
        }
        write_observations(&observations, exp.dim(), &obs)?;
        out.push(SimulateOutput {
            seed,
            trajectory,
            observations,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

/// Convergence and bookkeeping for one inference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: String,
    /// `filtered` for plain ADF, `smoothed` otherwise.
    pub path_kind: String,
    pub converged: bool,
    pub sweeps: usize,
    /// `None` when the free energy is not finite.
    pub log_evidence: Option<f64>,
    pub psd_repairs: usize,
    pub skipped_updates: usize,
    pub backtracks: usize,
    pub max_site_delta_history: Vec<f64>,
    pub observations: usize,
    pub grid: GridInfo,
    pub ep: EpConfig,
    pub rng_algorithm: String,
    pub non_paper_defaults: Vec<serde_json::Value>,
}

impl Diagnostics {
    fn new(exp: &Experiment, method: Method, r: &EpResult, n_obs: usize) -> Self {
        Self {
            method: method.name().to_string(),
            path_kind: match r.smoothed.kind {
                PathKind::Filtered => "filtered",
                PathKind::Smoothed => "smoothed",
            }
            .to_string(),
            converged: r.converged,
            sweeps: r.sweeps_run,
            log_evidence: r.log_evidence.is_finite().then_some(r.log_evidence),
            psd_repairs: r.psd_repairs,
            skipped_updates: r.skipped_updates,
            backtracks: r.backtracks,
            max_site_delta_history: r.max_site_delta_history.clone(),
            observations: n_obs,
            grid: GridInfo {
                t0: exp.grid.t0(),
                t1: exp.grid.t1(),
                n_steps: exp.grid.n_steps(),
            },
            ep: exp.ep.clone(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            non_paper_defaults: defaults_json(&exp.defaults),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub marginals: PathBuf,
    pub diagnostics: PathBuf,
    pub report: Diagnostics,
}

/// Runs the configured method on the observations in `data` and writes
/// `marginals-<method>.csv` and `diagnostics-<method>.json`.
///
/// With `require_convergence`, an EP run that stops at the sweep limit still
/// writes its files and then fails with [`CliError::NotConverged`].
pub fn infer_cmd(exp: &Experiment, data: &Path, require_convergence: bool) -> Result<InferOutput> {
    let obs = read_observations(data)?;
    if let Some(o) = obs.iter().find(|o| o.value.len() != exp.dim()) {
        return Err(CliError::Data {
            path: data.to_path_buf(),
            msg: format!(
                "observation at t = {} has {} values, model dimension is {}",
                o.time,
                o.value.len(),
                exp.dim()
            ),
        });
    }
    let r = infer(exp, exp.method, &obs, &exp.obs_model).map_err(|e| CliError::core("inference", e))?;
    ensure_dir(&exp.output)?;
    let name = exp.method.name();
    let marginals = exp.output.join(format!("marginals-{name}.csv"));
    let diagnostics = exp.output.join(format!("diagnostics-{name}.json"));
    write_marginals(&marginals, &exp.grid, &r.smoothed)?;
    let report = Diagnostics::new(exp, exp.method, &r, obs.len());
    let text = serde_json::to_string_pretty(&report).expect("diagnostics serialize");
    std::fs::write(&diagnostics, text).map_err(|e| CliError::io(&diagnostics, e))?;
    if require_convergence && !r.converged {
        return Err(CliError::NotConverged(format!(
            "{name} stopped after {} sweeps with max site change {:e}",
            r.sweeps_run,
            r.max_site_delta_history.last().copied().unwrap_or(f64::NAN)
        )));
    }
    Ok(InferOutput {
        marginals,
        diagnostics,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutput {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub report: BenchmarkReport,
}

/// Writes the report, then fails if too many replicates errored or, with
/// `require_convergence`, if any EP replicate did not converge.
pub fn benchmark_cmd(exp: &Experiment, require_convergence: bool) -> Result<BenchmarkOutput> {
    ensure_dir(&exp.output)?;
    let report = run_benchmark(exp)?;
    let (csv, json) = write_report(&exp.output, &report)?;
    report.check_failures()?;
    if require_convergence {
        let stuck: Vec<String> = report
            .replicates
            .iter()
            .filter(|r| r.ep.as_ref().is_some_and(|o| !o.converged))
            .map(|r| format!("variance {} seed {}", r.variance, r.seed))
            .collect();
        if !stuck.is_empty() {
            return Err(CliError::NotConverged(format!("EP replicates {}", stuck.join(", "))));
        }
    }
    Ok(BenchmarkOutput { csv, json, report })
}

/// Human-readable summary of a configuration that resolved successfully.
pub fn validate_cmd(exp: &Experiment) -> String {
    let model = match &exp.process {
        Process::Jump(m) => format!("jump process, {} species, {} reactions", m.dim(), m.num_reactions()),
        Process::Diffusion(s) => format!("diffusion, dimension {}", s.dim()),
    };
    let mut s = format!(
        "config OK\nmodel: {model}\ngrid: [{}, {}] in {} steps\nobservations: {}\nmethod: {}\nseeds: {:?}\n",
        exp.grid.t0(),
        exp.grid.t1(),
        exp.grid.n_steps(),
        exp.obs_times.len(),
        exp.method.name(),
        exp.seeds,
    );
    for d in &exp.defaults {
        s.push_str(&format!("implicit default: {} = {}\n", d.field, d.value));
    }
    s
}
