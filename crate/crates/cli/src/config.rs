//! Experiment configuration: a TOML document describing the process, the
//! time grid, the observation schedule and noise, the continuous loss, and
//! the inference and benchmark settings.
//!
//! Every section is optional. Omitted values fall back to the two-species
//! Lotka-Volterra benchmark set-up; the fallbacks that are experiment
//! choices rather than model facts are recorded in [`Experiment::defaults`]
//! and flagged `non_paper_default` in emitted diagnostics.

use std::path::{Path, PathBuf};

use ctep::{
    builtin_lotka_volterra, builtin_ou, cle_from_mjp, lotka_volterra, ContinuousLoss, DiscreteObsModel, EpConfig,
    GaussianMoments, LogNormalParam, MjpSpec, PolynomialMap, QuarticTerm, SdeSpec, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};

pub const DEFAULT_HORIZON: [f64; 2] = [0.0, 30.0];
pub const DEFAULT_N_STEPS: usize = ctep::filter::DEFAULT_STEPS;
pub const DEFAULT_OBSERVATION_COUNT: usize = 20;
pub const DEFAULT_START: [f64; 2] = [100.0, 100.0];
pub const DEFAULT_INIT_MEAN: [f64; 2] = [100.0, 100.0];
pub const DEFAULT_INIT_VARIANCE: f64 = 100.0;
pub const DEFAULT_NOISE_VARIANCE: f64 = 750.0;
pub const DEFAULT_BENCHMARK_VARIANCES: [f64; 3] = [500.0, 750.0, 1000.0];
pub const DEFAULT_REPLICATES: usize = 40;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `[t0, t1]`.
    pub horizon: Option<[f64; 2]>,
    pub n_steps: Option<usize>,
    /// Initial state of simulated paths (species counts for jump processes).
    pub start: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub observations: ObservationConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub ep: EpConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Predator-prey reaction network; `rates` are `(k0, k1, k2, k3)`.
    LotkaVolterra { rates: Option<[f64; 4]> },
    /// `dx = A x dt + b^{1/2} dW`.
    Ou { a: Vec<Vec<f64>>, b: Vec<Vec<f64>> },
    /// Reaction network: `stoich[i][r]` is the change of species `i` by reaction `r`.
    Mjp {
        stoich: Vec<Vec<i64>>,
        rates: Vec<Vec<Term>>,
    },
    /// Polynomial diffusion; `diffusion` must be symmetric.
    Sde {
        drift: Vec<Vec<Term>>,
        diffusion: Vec<Vec<Vec<Term>>>,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::LotkaVolterra { rates: None }
    }
}

/// One monomial `coeff · Π x_i^{exponents[i]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coeff: f64,
    pub exponents: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Evenly spaced observations at `t0 + i (t1 - t0) / count`, `i = 1..=count`.
    pub count: Option<usize>,
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub noise: NoiseConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseConfig {
    LogNormal {
        variance: f64,
        #[serde(default)]
        param: LogNormalParam,
    },
    Gaussian {
        r: Vec<Vec<f64>>,
    },
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::LogNormal {
            variance: DEFAULT_NOISE_VARIANCE,
            param: LogNormalParam::MeanVariance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossConfig {
    #[default]
    None,
    /// `U(x) = ½ xᵀ A x - cᵀ x`.
    Quadratic {
        a: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    Quartic {
        terms: Vec<QuarticConfig>,
    },
}

/// `a (x_dim - b)⁴` active for `t` in `window`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuarticConfig {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
    pub window: [f64; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Ep,
    Adf,
    AdfS,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ep => "ep",
            Method::Adf => "adf",
            Method::AdfS => "adf-s",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default)]
    pub method: Method,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub variances: Option<Vec<f64>>,
    pub replicates: Option<usize>,
    /// Explicit replicate seeds; otherwise `base..base + replicates`.
    pub seeds: Option<Vec<u64>>,
    pub workers: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug)]
pub enum Process {
    Jump(MjpSpec),
    Diffusion(SdeSpec),
}

/// A fallback value the run depends on that is an experiment choice.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DefaultRecord {
    pub field: &'static str,
    pub value: serde_json::Value,
    pub non_paper_default: bool,
}

/// A validated configuration with every default filled in.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub process: Process,
    /// The prior used for inference (the CLE for jump processes).
    pub sde: SdeSpec,
    pub grid: TimeGrid,
    pub start: DVector<f64>,
    pub init: GaussianMoments,
    pub obs_times: Vec<f64>,
    pub obs_model: DiscreteObsModel,
    pub loss: ContinuousLoss,
    pub method: Method,
    pub ep: EpConfig,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub variances: Vec<f64>,
    pub benchmark_seeds: Vec<u64>,
    pub workers: usize,
    pub defaults: Vec<DefaultRecord>,
}

impl Experiment {
    pub fn dim(&self) -> usize {
        self.sde.dim()
    }

    /// The observation model with its noise level replaced by `variance`.
    /// Gaussian noise becomes `variance · I`.
    pub fn obs_model_with_variance(&self, variance: f64) -> Result<DiscreteObsModel> {
        let m = match &self.obs_model {
            DiscreteObsModel::LogNormal { param, .. } => DiscreteObsModel::log_normal_with(variance, *param),
            DiscreteObsModel::Gaussian { r } => {
                DiscreteObsModel::gaussian(DMatrix::identity(r.nrows(), r.nrows()) * variance)
            }
        };
        m.map_err(|e| CliError::config(format!("benchmark.variances: {e}")))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::config(format!("config file not found: {}", path.display()))
        } else {
            CliError::io(path, e)
        }
    })?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(msg) => CliError::config(format!("{}: {msg}", path.display())),
        e => e,
    })
}

fn matrix(field: &str, rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::config(format!("{field}: expected a {d}x{d} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CliError::config(format!("{field}: entries must be finite")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn polynomial(field: &str, terms: &[Term], d: usize) -> Result<PolynomialMap> {
    PolynomialMap::from_terms(d, terms.iter().map(|t| (t.coeff, t.exponents.clone())))
        .map_err(|e| CliError::config(format!("{field}: {e}")))
}

fn build_process(model: &ModelConfig) -> Result<Process> {
    let p = match model {
        ModelConfig::LotkaVolterra { rates: None } => Process::Jump(builtin_lotka_volterra()),
        ModelConfig::LotkaVolterra { rates: Some(k) } => {
            if k.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(CliError::config(
                    "model.rates: rate constants must be finite and non-negative",
                ));
            }
            Process::Jump(lotka_volterra(*k))
        }
        ModelConfig::Ou { a, b } => {
            let d = a.len();
            let spec = builtin_ou(&matrix("model.a", a, d)?, &matrix("model.b", b, d)?)
                .map_err(|e| CliError::config(format!("model: {e}")))?;
            Process::Diffusion(spec)
        }
        ModelConfig::Mjp { stoich, rates } => {
            let d = stoich.len();
            let rates = rates
                .iter()
                .enumerate()
                .map(|(r, t)| polynomial(&format!("model.rates[{r}]"), t, d))
                .collect::<Result<Vec<_>>>()?;
            Process::Jump(MjpSpec::new(stoich.clone(), rates).map_err(|e| CliError::config(format!("model: {e}")))?)
        }
        ModelConfig::Sde { drift, diffusion } => {
            let d = drift.len();
            let drift = drift
                .iter()
                .enumerate()
                .map(|(i, t)| polynomial(&format!("model.drift[{i}]"), t, d))
                .collect::<Result<Vec<_>>>()?;
            if diffusion.len() != d || diffusion.iter().any(|r| r.len() != d) {
                return Err(CliError::config(format!("model.diffusion: expected {d}x{d} entries")));
            }
            let diffusion = diffusion
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, t)| polynomial(&format!("model.diffusion[{i}][{j}]"), t, d))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Process::Diffusion(SdeSpec::new(drift, diffusion).map_err(|e| CliError::config(format!("model: {e}")))?)
        }
    };
    Ok(p)
}

fn vector(field: &str, v: &[f64], d: usize) -> Result<DVector<f64>> {
    if v.len() != d {
        return Err(CliError::config(format!(
            "{field}: has length {}, model dimension is {d}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::config(format!("{field}: entries must be finite")));
    }
    Ok(DVector::from_column_slice(v))
}

impl ExperimentConfig {
    pub fn resolve(&self, ov: &Overrides) -> Result<Experiment> {
        let mut defaults = Vec::new();
        let mut note = |field: &'static str, value: serde_json::Value| {
            defaults.push(DefaultRecord {
                field,
                value,
                non_paper_default: true,
            })
        };

        let process = build_process(&self.model)?;
        let sde = match &process {
            Process::Jump(m) => cle_from_mjp(m),
            Process::Diffusion(s) => s.clone(),
        };
        let d = sde.dim();

        let [t0, t1] = self.horizon.unwrap_or_else(|| {
            note("horizon", json!(DEFAULT_HORIZON));
            DEFAULT_HORIZON
        });
        let n_steps = self.n_steps.unwrap_or_else(|| {
            note("n_steps", json!(DEFAULT_N_STEPS));
            DEFAULT_N_STEPS
        });
        let grid = TimeGrid::new(t0, t1, n_steps).map_err(|e| CliError::config(format!("horizon/n_steps: {e}")))?;

        let start = match &self.start {
            Some(s) => vector("start", s, d)?,
            None => {
                note("start", json!(DEFAULT_START));
                vector("start (default)", &DEFAULT_START, d)?
            }
        };
        if matches!(process, Process::Jump(_)) && start.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(CliError::config(
                "start: jump processes need non-negative integer counts",
            ));
        }

        let init = match &self.initial {
            Some(ic) => {
                let mean = vector("initial.mean", &ic.mean, d)?;
                let cov = matrix("initial.cov", &ic.cov, d)?;
                GaussianMoments::new(mean, cov).map_err(|e| CliError::config(format!("initial: {e}")))?
            }
            None => {
                note(
                    "initial",
                    json!({ "mean": DEFAULT_INIT_MEAN, "cov": format!("{DEFAULT_INIT_VARIANCE}*I") }),
                );
                let mean = vector("initial.mean (default)", &DEFAULT_INIT_MEAN, d)?;
                GaussianMoments::new(mean, DMatrix::identity(d, d) * DEFAULT_INIT_VARIANCE).expect("default is SPD")
            }
        };

        let obs_times = match (&self.observations.times, self.observations.count) {
            (Some(_), Some(_)) => {
                return Err(CliError::config(
                    "observations: give either `count` or `times`, not both",
                ));
            }
            (Some(ts), None) => ts.clone(),
            (None, count) => {
                let n = count.unwrap_or_else(|| {
                    note("observations.count", json!(DEFAULT_OBSERVATION_COUNT));
                    DEFAULT_OBSERVATION_COUNT
                });
                (1..=n).map(|i| t0 + (t1 - t0) * i as f64 / n as f64).collect()
            }
        };
        for (i, t) in obs_times.iter().enumerate() {
            if !(t0..=t1).contains(t) {
                return Err(CliError::config(format!(
                    "observations.times[{i}] = {t} is outside the horizon [{t0}, {t1}]"
                )));
            }
            grid.snap(*t)
                .map_err(|e| CliError::config(format!("observations.times[{i}]: {e}")))?;
            if i > 0 && grid.snap(*t).ok() <= grid.snap(obs_times[i - 1]).ok() {
                return Err(CliError::config(format!(
                    "observations.times[{i}] = {t} does not fall on a later grid node than its predecessor"
                )));
            }
        }

        let obs_model = match &self.observations.noise {
            NoiseConfig::LogNormal { variance, param } => DiscreteObsModel::log_normal_with(*variance, *param),
            NoiseConfig::Gaussian { r } => DiscreteObsModel::gaussian(matrix("observations.noise.r", r, d)?),
        }
        .map_err(|e| CliError::config(format!("observations.noise: {e}")))?;
        obs_model
            .validate(d)
            .map_err(|e| CliError::config(format!("observations.noise: {e}")))?;

        let loss = match &self.loss {
            LossConfig::None => ContinuousLoss::None,
            LossConfig::Quadratic { a, c } => ContinuousLoss::Quadratic {
                a: matrix("loss.a", a, d)?,
                c: vector("loss.c", c, d)?,
            },
            LossConfig::Quartic { terms } => ContinuousLoss::Quartic(
                terms
                    .iter()
                    .map(|q| QuarticTerm {
                        dim: q.dim,
                        a: q.a,
                        b: q.b,
                        window: (q.window[0], q.window[1]),
                    })
                    .collect(),
            ),
        };
        loss.validate(d, t0, t1)
            .map_err(|e| CliError::config(format!("loss: {e}")))?;

        self.ep.validate().map_err(|e| CliError::config(format!("ep: {e}")))?;

        let seeds = match (ov.seed, &self.seeds) {
            (Some(s), _) => vec![s],
            (None, Some(s)) if !s.is_empty() => s.clone(),
            (None, Some(_)) => return Err(CliError::config("seeds: list is empty")),
            (None, None) => vec![0],
        };

        let variances = self
            .benchmark
            .variances
            .clone()
            .unwrap_or_else(|| DEFAULT_BENCHMARK_VARIANCES.to_vec());
        if variances.is_empty() || variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CliError::config(
                "benchmark.variances: need one or more positive values",
            ));
        }
        let benchmark_seeds = match (&self.benchmark.seeds, self.benchmark.replicates) {
            (Some(s), Some(n)) if s.len() != n => {
                return Err(CliError::config(format!(
                    "benchmark: {} seeds listed but replicates = {n}",
                    s.len()
                )));
            }
            (Some(s), _) => s.clone(),
            (None, n) => {
                let base = seeds[0];
                (0..n.unwrap_or(DEFAULT_REPLICATES) as u64)
                    .map(|i| base.wrapping_add(i))
                    .collect()
            }
        };
        if benchmark_seeds.is_empty() {
            return Err(CliError::config("benchmark: need at least one replicate"));
        }
        let workers = ov
            .workers
            .or(self.benchmark.workers)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if workers == 0 {
            return Err(CliError::config("workers must be at least 1"));
        }

        Ok(Experiment {
            process,
            sde,
            grid,
            start,
            init,
            obs_times,
            obs_model,
            loss,
            method: self.inference.method,
            ep: self.ep.clone(),
            seeds,
            output: ov
                .out
                .clone()
                .or_else(|| self.output.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
            variances,
            benchmark_seeds,
            workers,
            defaults,
        })
    }
}
