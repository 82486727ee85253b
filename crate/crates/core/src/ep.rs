//! Expectation propagation and assumed density filtering over a time grid.
//!
//! EP keeps one discrete site per observation and one continuous site per
//! grid node. Each sweep runs a forward filter and a backward smoother under
//! the current sites, recomputes every site from the same smoothed marginals
//! and assigns them jointly with damping.

use serde::{Deserialize, Serialize};

use crate::closure::MomentClosure;
use crate::error::{Error, Result};
use crate::filter::{backward_with, forward_with, ForwardPassResult, MarginalPath, SiteSet, TimeGrid};
use crate::gaussian::{repair_psd, GaussianCanonical, GaussianMoments, EPS_PSD};
use crate::likelihood::{
    continuous_site_update, expected_loss, initial_continuous_site, initial_discrete_site, tilted_moments_with_order,
    ContinuousLoss, DiscreteObsModel, Observation, TiltedMoments, DEFAULT_QUADRATURE_ORDER,
};
use crate::process::SdeSpec;

/// Number of times a sweep's step is halved when the damped sites break the filter.
const MAX_BACKTRACKS: usize = 6;

/// Starting point for the site parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteInit {
    /// Project each likelihood against a nearly flat Gaussian; zero where that is improper.
    #[default]
    Flat,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpConfig {
    pub damping: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub flat_scale: f64,
    pub eps_psd: f64,
    pub quadrature_order: usize,
    pub init: SiteInit,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tolerance: 0.01,
            max_sweeps: 50,
            flat_scale: 1e-6,
            eps_psd: EPS_PSD,
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
            init: SiteInit::Flat,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping must lie in (0, 1]");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_sweeps == 0 {
            return bad("max_sweeps must be at least 1");
        }
        if !(self.flat_scale > 0.0) {
            return bad("flat_scale must be positive");
        }
        if !(self.eps_psd > 0.0) {
            return bad("eps_psd must be positive");
        }
        if self.quadrature_order == 0 {
            return bad("quadrature_order must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpResult {
    /// Smoothed marginals (filtered for plain ADF).
    pub smoothed: MarginalPath,
    pub sites: SiteSet,
    /// Free-energy approximation of the log evidence; NaN if it could not be evaluated.
    pub log_evidence: f64,
    pub sweeps_run: usize,
    pub converged: bool,
    pub max_site_delta_history: Vec<f64>,
    pub psd_repairs: usize,
    /// Site updates skipped because the cavity was improper or the tilted integral underflowed.
    pub skipped_updates: usize,
    /// Step halvings taken after a damped update broke the filter.
    pub backtracks: usize,
}

/// Everything an inference run needs besides its configuration.
#[derive(Clone, Copy, Debug)]
pub struct InferenceProblem<'a> {
    pub spec: &'a SdeSpec,
    pub observations: &'a [Observation],
    pub obs_model: &'a DiscreteObsModel,
    pub loss: &'a ContinuousLoss,
    pub init: &'a GaussianMoments,
    pub grid: &'a TimeGrid,
}

impl InferenceProblem<'_> {
    /// Grid node of every observation, checked for shape and order.
    fn prepare(&self) -> Result<Vec<usize>> {
        let d = self.spec.dim();
        if self.init.dim() != d {
            return Err(Error::Dimension(format!(
                "initial moments of dimension {} for a {d}-dimensional model",
                self.init.dim()
            )));
        }
        self.obs_model.validate(d)?;
        self.loss.validate(d, self.grid.t0(), self.grid.t1())?;
        let mut nodes = Vec::with_capacity(self.observations.len());
        for y in self.observations {
            if y.value.len() != d {
                return Err(Error::Dimension(format!(
                    "observation at t = {} has length {}",
                    y.time,
                    y.value.len()
                )));
            }
            self.obs_model.check_observation(y)?;
            let k = self.grid.snap(y.time)?;
            if nodes.last().is_some_and(|last| *last >= k) {
                return Err(Error::InvalidArgument(format!(
                    "observation at t = {} is not after the previous one on the grid",
                    y.time
                )));
            }
            nodes.push(k);
        }
        Ok(nodes)
    }
}

struct Pass {
    fwd: ForwardPassResult,
    smoothed: MarginalPath,
    repairs: usize,
}

fn run_pass(closure: &MomentClosure, sites: &SiteSet, p: &InferenceProblem, eps_psd: f64) -> Result<Pass> {
    let mut next = sites.discrete.iter().peekable();
    let fwd = forward_with(
        closure,
        p.init,
        p.grid,
        eps_psd,
        |k, _| Ok(sites.continuous[k].clone()),
        |k, _| {
            Ok(match next.peek() {
                Some((node, _)) if *node == k => next.next().map(|(_, s)| s.clone()),
                _ => None,
            })
        },
    )?;
    let (smoothed, back_repairs) = backward_with(closure, &fwd, p.grid, eps_psd)?;
    let repairs = fwd.psd_repairs + back_repairs;
    Ok(Pass { fwd, smoothed, repairs })
}

fn tilted(
    model: &DiscreteObsModel,
    y: &Observation,
    cavity: &GaussianCanonical,
    cfg: &EpConfig,
    repairs: &mut usize,
) -> Result<TiltedMoments> {
    let mut t = tilted_moments_with_order(model, y, cavity, cfg.quadrature_order)?;
    if repair_psd(&mut t.moments.cov, cfg.eps_psd) {
        *repairs += 1;
    }
    Ok(t)
}

fn skippable(e: &Error) -> bool {
    matches!(
        e.root(),
        Error::ImproperCavity | Error::QuadratureUnderflow | Error::NonPositiveDefinite(_)
    )
}

struct SweepUpdate {
    proposal: SiteSet,
    skipped: usize,
    repairs: usize,
}

/// Moment-matched discrete sites and loss-gradient continuous sites from one pass.
fn propose(sites: &SiteSet, pass: &Pass, p: &InferenceProblem, cfg: &EpConfig) -> Result<SweepUpdate> {
    let mut skipped = 0;
    let mut repairs = 0;
    let mut discrete = Vec::with_capacity(sites.discrete.len());
    for ((k, lam), y) in sites.discrete.iter().zip(p.observations) {
        let attempt = (|| -> Result<GaussianCanonical> {
            let post = pass.smoothed.nodes[*k].to_canonical()?;
            let cavity = post.sub(lam);
            let t = tilted(p.obs_model, y, &cavity, cfg, &mut repairs)?;
            Ok(t.moments.to_canonical()?.sub(&cavity))
        })();
        match attempt {
            Ok(site) => discrete.push((*k, site)),
            Err(e) if skippable(&e) => {
                skipped += 1;
                discrete.push((*k, lam.clone()));
            }
            Err(e) => return Err(e.at_node(*k)),
        }
    }
    let continuous = pass
        .smoothed
        .nodes
        .iter()
        .enumerate()
        .map(|(k, m)| continuous_site_update(p.loss, m, p.grid.time(k)))
        .collect();
    Ok(SweepUpdate {
        proposal: SiteSet { discrete, continuous },
        skipped,
        repairs,
    })
}

fn initial_sites(p: &InferenceProblem, nodes: &[usize], cfg: &EpConfig) -> Result<SiteSet> {
    let d = p.spec.dim();
    let mut sites = SiteSet::zeros(d, p.grid, nodes);
    if cfg.init == SiteInit::Zero {
        return Ok(sites);
    }
    let flat = GaussianCanonical::flat(d, cfg.flat_scale);
    for ((_, site), y) in sites.discrete.iter_mut().zip(p.observations) {
        *site = initial_discrete_site(p.obs_model, y, &flat)?;
    }
    let lam = initial_continuous_site(p.loss, d);
    sites.continuous.iter_mut().for_each(|s| *s = lam.clone());
    Ok(sites)
}

/// Log tilted partition of every discrete site against its cavity in `pass`.
fn tilted_log_partitions(sites: &SiteSet, pass: &Pass, p: &InferenceProblem, cfg: &EpConfig) -> Result<Vec<f64>> {
    let mut scratch = 0;
    sites
        .discrete
        .iter()
        .zip(p.observations)
        .map(|((k, lam), y)| {
            let cavity = pass.smoothed.nodes[*k].to_canonical()?.sub(lam);
            Ok(tilted(p.obs_model, y, &cavity, cfg, &mut scratch)?.log_partition)
        })
        .collect()
}

/// Approximate log evidence of a completed pass.
///
/// `log Z_q(λ) + Σ_i [log ∫ p(y_i|x) e^{η_i·f} dx - log Z_f(λ_i + η_i)]
///  - ∫ ⟨U⟩ dt - ∫ λ_t·⟨f⟩ dt`, with both integrals by the trapezoid rule.
pub fn free_energy(
    fwd_log_norm: f64,
    sites: &SiteSet,
    smoothed: &MarginalPath,
    tilted_log_partitions: &[f64],
    grid: &TimeGrid,
    loss: &ContinuousLoss,
) -> Result<f64> {
    sites.validate(grid)?;
    if smoothed.len() != grid.n_nodes() || tilted_log_partitions.len() != sites.discrete.len() {
        return Err(Error::Dimension("free energy inputs do not match the site set".into()));
    }
    let mut l = fwd_log_norm;
    for ((k, _), log_tilted) in sites.discrete.iter().zip(tilted_log_partitions) {
        l += log_tilted - smoothed.nodes[*k].to_canonical()?.log_partition()?;
    }
    for (k, (m, lam)) in smoothed.nodes.iter().zip(&sites.continuous).enumerate() {
        let w = grid.weight(k);
        l -= w * (expected_loss(loss, m, grid.time(k)) + lam.dot_moments(m));
    }
    if !l.is_finite() {
        return Err(Error::DivergedMoments { magnitude: l.abs() });
    }
    Ok(l)
}

/// Expectation propagation with the default configuration of the given `cfg`.
pub fn run_ep(
    spec: &SdeSpec,
    obs: &[Observation],
    obs_model: &DiscreteObsModel,
    loss: &ContinuousLoss,
    init: &GaussianMoments,
    grid: &TimeGrid,
    cfg: &EpConfig,
) -> Result<EpResult> {
    run_ep_problem(
        &InferenceProblem {
            spec,
            observations: obs,
            obs_model,
            loss,
            init,
            grid,
        },
        cfg,
    )
}

pub fn run_ep_problem(p: &InferenceProblem, cfg: &EpConfig) -> Result<EpResult> {
    cfg.validate()?;
    let nodes = p.prepare()?;
    let closure = MomentClosure::new(p.spec)?;

    let mut sites = initial_sites(p, &nodes, cfg)?;
    let mut pass = match run_pass(&closure, &sites, p, cfg.eps_psd) {
        Ok(pass) => pass,
        // a flat-projected initialization can be too aggressive for a nonlinear prior
        Err(e) if e.is_numerical() && cfg.init == SiteInit::Flat => {
            sites = SiteSet::zeros(p.spec.dim(), p.grid, &nodes);
            run_pass(&closure, &sites, p, cfg.eps_psd).map_err(|e| e.in_sweep(0))?
        }
        Err(e) => return Err(e.in_sweep(0)),
    };
    let mut repairs = pass.repairs;
    let mut skipped = 0;
    let mut backtracks = 0;
    let mut history = Vec::new();
    let mut converged = false;

    for sweep in 1..=cfg.max_sweeps {
        let update = propose(&sites, &pass, p, cfg).map_err(|e| e.in_sweep(sweep))?;
        skipped += update.skipped;
        repairs += update.repairs;
        // largest moment-matching residual: the change an undamped step would make
        let delta = sites.max_abs_diff(&update.proposal);

        let mut step = cfg.damping;
        let mut attempt = 0;
        let (next_sites, next_pass) = loop {
            let candidate = sites.blend(&update.proposal, step);
            match run_pass(&closure, &candidate, p, cfg.eps_psd) {
                Ok(next) => break (candidate, next),
                Err(e) if e.is_numerical() && attempt < MAX_BACKTRACKS => {
                    attempt += 1;
                    backtracks += 1;
                    step *= 0.5;
                }
                Err(e) => return Err(e.in_sweep(sweep)),
            }
        };
        sites = next_sites;
        pass = next_pass;
        repairs += pass.repairs;
        history.push(delta);
        if delta <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    let log_evidence = tilted_log_partitions(&sites, &pass, p, cfg)
        .and_then(|lt| free_energy(pass.fwd.log_norm, &sites, &pass.smoothed, &lt, p.grid, p.loss))
        .unwrap_or(f64::NAN);

    Ok(EpResult {
        smoothed: pass.smoothed,
        sites,
        log_evidence,
        sweeps_run: history.len(),
        converged,
        max_site_delta_history: history,
        psd_repairs: repairs,
        skipped_updates: skipped,
        backtracks,
    })
}

/// Assumed density filtering, optionally followed by a smoothing pass.
pub fn run_adf(
    spec: &SdeSpec,
    obs: &[Observation],
    obs_model: &DiscreteObsModel,
    loss: &ContinuousLoss,
    init: &GaussianMoments,
    grid: &TimeGrid,
    smoothing: bool,
) -> Result<EpResult> {
    run_adf_problem(
        &InferenceProblem {
            spec,
            observations: obs,
            obs_model,
            loss,
            init,
            grid,
        },
        smoothing,
        &EpConfig::default(),
    )
}

pub fn run_adf_problem(p: &InferenceProblem, smoothing: bool, cfg: &EpConfig) -> Result<EpResult> {
    cfg.validate()?;
    let nodes = p.prepare()?;
    let closure = MomentClosure::new(p.spec)?;

    let mut repairs = 0;
    let mut skipped = 0;
    let mut log_tilted_sum = 0.0;
    let mut discrete = Vec::with_capacity(nodes.len());
    let mut obs_iter = nodes.iter().zip(p.observations).peekable();

    let fwd = forward_with(
        &closure,
        p.init,
        p.grid,
        cfg.eps_psd,
        |k, m| Ok(continuous_site_update(p.loss, m, p.grid.time(k))),
        |k, m| {
            let Some((_, y)) = obs_iter.next_if(|(node, _)| **node == k) else {
                return Ok(None);
            };
            let cavity = m.to_canonical()?;
            match tilted(p.obs_model, y, &cavity, cfg, &mut repairs) {
                Ok(t) => {
                    log_tilted_sum += t.log_partition - cavity.log_partition()?;
                    let site = t.moments.to_canonical()?.sub(&cavity);
                    discrete.push((k, site.clone()));
                    Ok(Some(site))
                }
                Err(e) if skippable(&e) => {
                    skipped += 1;
                    discrete.push((k, GaussianCanonical::zeros(m.dim())));
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        },
    )
    .map_err(|e| e.in_sweep(1))?;
    repairs += fwd.psd_repairs;

    let expected_loss_integral: f64 = fwd
        .path
        .nodes
        .iter()
        .enumerate()
        .map(|(k, m)| p.grid.weight(k) * expected_loss(p.loss, m, p.grid.time(k)))
        .sum();
    let log_evidence = log_tilted_sum - expected_loss_integral;

    let path = if smoothing {
        let (sm, r) = backward_with(&closure, &fwd, p.grid, cfg.eps_psd).map_err(|e| e.in_sweep(1))?;
        repairs += r;
        sm
    } else {
        fwd.path.clone()
    };

    Ok(EpResult {
        smoothed: path,
        sites: SiteSet {
            discrete,
            continuous: fwd.continuous_sites,
        },
        log_evidence,
        sweeps_run: 1,
        converged: true,
        max_site_delta_history: Vec::new(),
        psd_repairs: repairs,
        skipped_updates: skipped,
        backtracks: 0,
    })
}
