//! Time-grid machinery: fixed-step RK4 integration of the closed moment
//! equations, forward filtering with site injection, backward smoothing, and
//! accumulation of the approximate log-normalizer.
//!
//! Continuous sites are piecewise constant per grid node and injected with a
//! symmetric split: half a step of the site before the prior RK4 step of a
//! cell and half after it, each as an exact canonical increment. The total
//! weight a node receives is therefore its trapezoid weight on the grid.

use crate::closure::{MomentClosure, MomentDerivative};
use crate::error::{Error, Result};
use crate::gaussian::{repair_psd, symmetrize, GaussianCanonical, GaussianMoments, EPS_PSD};
use crate::process::SdeSpec;

/// Magnitude above which moments are treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default number of grid cells.
pub const DEFAULT_STEPS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidArgument(format!("empty horizon [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { t0, t1, n_steps })
    }

    /// Grid with the default resolution of [`DEFAULT_STEPS`] cells.
    pub fn with_default_steps(t0: f64, t1: f64) -> Result<Self> {
        Self::new(t0, t1, DEFAULT_STEPS)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.time(k)).collect()
    }

    /// Trapezoid weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n_steps {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }

    /// Nearest node to `t`; more than half a step away is a configuration error.
    pub fn snap(&self, t: f64) -> Result<usize> {
        let dt = self.dt();
        let k = ((t - self.t0) / dt).round();
        if !k.is_finite() || k < 0.0 || k > self.n_steps as f64 {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside grid [{}, {}]",
                self.t0, self.t1
            )));
        }
        let k = k as usize;
        if (self.time(k) - t).abs() > 0.5 * dt * (1.0 + 1e-9) {
            return Err(Error::InvalidArgument(format!("time {t} is not within dt/2 of a node")));
        }
        Ok(k)
    }
}

/// Discrete sites at observation nodes plus a continuous site field on every node.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSet {
    pub discrete: Vec<(usize, GaussianCanonical)>,
    pub continuous: Vec<GaussianCanonical>,
}

impl SiteSet {
    pub fn zeros(dim: usize, grid: &TimeGrid, obs_nodes: &[usize]) -> Self {
        Self {
            discrete: obs_nodes.iter().map(|k| (*k, GaussianCanonical::zeros(dim))).collect(),
            continuous: vec![GaussianCanonical::zeros(dim); grid.n_nodes()],
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.continuous.len() != grid.n_nodes() {
            return Err(Error::Dimension(format!(
                "continuous site field has {} entries for {} nodes",
                self.continuous.len(),
                grid.n_nodes()
            )));
        }
        let mut last = None;
        for (k, _) in &self.discrete {
            if *k > grid.n_steps() {
                return Err(Error::InvalidArgument(format!("site node {k} outside grid")));
            }
            if last.is_some_and(|l| l >= *k) {
                return Err(Error::InvalidArgument(
                    "discrete site nodes must be strictly increasing".into(),
                ));
            }
            last = Some(*k);
        }
        Ok(())
    }

    /// Largest entrywise change between two site sets of the same shape.
    pub fn max_abs_diff(&self, other: &SiteSet) -> f64 {
        let d = self
            .discrete
            .iter()
            .zip(&other.discrete)
            .map(|((_, a), (_, b))| a.max_abs_diff(b));
        let c = self
            .continuous
            .iter()
            .zip(&other.continuous)
            .map(|(a, b)| a.max_abs_diff(b));
        d.chain(c).fold(0.0, f64::max)
    }

    /// `(1 - w)·self + w·other`.
    pub fn blend(&self, other: &SiteSet, w: f64) -> SiteSet {
        SiteSet {
            discrete: self
                .discrete
                .iter()
                .zip(&other.discrete)
                .map(|((k, a), (_, b))| (*k, a.blend(b, w)))
                .collect(),
            continuous: self
                .continuous
                .iter()
                .zip(&other.continuous)
                .map(|(a, b)| a.blend(b, w))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Filtered,
    Smoothed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPath {
    pub kind: PathKind,
    pub nodes: Vec<GaussianMoments>,
}

impl MarginalPath {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardPassResult {
    /// Filtered moments at each node after every update at that node.
    pub path: MarginalPath,
    /// Moments at each node before the discrete site there (equal to `path` where none).
    pub before_discrete: Vec<GaussianMoments>,
    /// Continuous site actually applied at each node.
    pub continuous_sites: Vec<GaussianCanonical>,
    /// Accumulated `log Z_f(η + δ) - log Z_f(η)` over all site updates.
    pub log_norm: f64,
    pub psd_repairs: usize,
}

fn check_finite(m: &GaussianMoments) -> Result<()> {
    let mag = m.max_abs();
    if !m.is_finite() || mag > DIVERGENCE_LIMIT {
        return Err(Error::DivergedMoments { magnitude: mag });
    }
    Ok(())
}

fn axpy(base: &GaussianMoments, d: &MomentDerivative, h: f64) -> GaussianMoments {
    let mut cov = &base.cov + &d.dcov * h;
    symmetrize(&mut cov);
    GaussianMoments {
        mean: &base.mean + &d.dmean * h,
        cov,
    }
}

fn combine(
    k1: &MomentDerivative,
    k2: &MomentDerivative,
    k3: &MomentDerivative,
    k4: &MomentDerivative,
) -> MomentDerivative {
    MomentDerivative {
        dmean: (&k1.dmean + &k2.dmean * 2.0 + &k3.dmean * 2.0 + &k4.dmean) / 6.0,
        dcov: (&k1.dcov + &k2.dcov * 2.0 + &k3.dcov * 2.0 + &k4.dcov) / 6.0,
    }
}

/// One classical RK4 step of the prior moment flow.
pub(crate) fn rk4_forward(closure: &MomentClosure, m: &GaussianMoments, dt: f64) -> GaussianMoments {
    let k1 = closure.forward(m);
    let k2 = closure.forward(&axpy(m, &k1, 0.5 * dt));
    let k3 = closure.forward(&axpy(m, &k2, 0.5 * dt));
    let k4 = closure.forward(&axpy(m, &k3, dt));
    axpy(m, &combine(&k1, &k2, &k3, &k4), dt)
}

/// Moment rate induced by a continuous site: `dμ/dt = ∂²log Z_f(η) λ`.
fn site_rate(m: &GaussianMoments, site: &GaussianCanonical) -> MomentDerivative {
    if site.is_zero() {
        return MomentDerivative::zeros(m.dim());
    }
    let pj = &m.cov * &site.j;
    MomentDerivative {
        dmean: &m.cov * &site.h - &pj * &m.mean,
        dcov: -(&pj * &m.cov),
    }
}

/// Bayesian update by `exp(scale·site·f)`, returning the log-normalizer increment.
fn apply_site(m: &GaussianMoments, site: &GaussianCanonical, scale: f64) -> Result<(GaussianMoments, f64)> {
    if scale == 0.0 || site.is_zero() {
        return Ok((m.clone(), 0.0));
    }
    let eta = m.to_canonical()?;
    let updated = eta.add_site(site, scale);
    let out = updated.to_moments()?;
    let inc = updated.log_partition()? - eta.log_partition()?;
    Ok((out, inc))
}

fn repaired(mut m: GaussianMoments, eps: f64, repairs: &mut usize) -> Result<GaussianMoments> {
    check_finite(&m)?;
    if repair_psd(&mut m.cov, eps) {
        *repairs += 1;
    }
    Ok(m)
}

/// Forward pass with sites supplied on the fly.
///
/// `continuous(k, m)` returns the continuous site for node `k` given the
/// current filtered moments there; `discrete(k, m)` returns the discrete
/// site (if any) at node `k` given the moments just before it is applied.
pub(crate) fn forward_with<C, D>(
    closure: &MomentClosure,
    init: &GaussianMoments,
    grid: &TimeGrid,
    eps_psd: f64,
    mut continuous: C,
    mut discrete: D,
) -> Result<ForwardPassResult>
where
    C: FnMut(usize, &GaussianMoments) -> Result<GaussianCanonical>,
    D: FnMut(usize, &GaussianMoments) -> Result<Option<GaussianCanonical>>,
{
    if init.dim() != closure.dim() {
        return Err(Error::Dimension(format!(
            "initial moments have dimension {} for a {}-dimensional model",
            init.dim(),
            closure.dim()
        )));
    }
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut repairs = 0;
    let mut log_norm = 0.0;
    let mut path = Vec::with_capacity(n + 1);
    let mut before = Vec::with_capacity(n + 1);
    let mut applied = Vec::with_capacity(n + 1);

    let mut state = repaired(init.clone(), eps_psd, &mut repairs).map_err(|e| e.at_node(0))?;
    before.push(state.clone());
    if let Some(site) = discrete(0, &state).map_err(|e| e.at_node(0))? {
        let (s, inc) = apply_site(&state, &site, 1.0).map_err(|e| e.at_node(0))?;
        state = s;
        log_norm += inc;
    }
    path.push(state.clone());
    let mut lam = continuous(0, &state).map_err(|e| e.at_node(0))?;

    for k in 0..n {
        let (s, next) = (|| -> Result<(GaussianMoments, GaussianCanonical)> {
            let (s, inc) = apply_site(&state, &lam, 0.5 * dt)?;
            log_norm += inc;
            let s = repaired(rk4_forward(closure, &s, dt), eps_psd, &mut repairs)?;
            let next = continuous(k + 1, &s)?;
            let (s, inc) = apply_site(&s, &next, 0.5 * dt)?;
            log_norm += inc;
            Ok((s, next))
        })()
        .map_err(|e| e.at_node(k + 1))?;
        applied.push(lam);
        state = s;
        lam = next;
        before.push(state.clone());
        if let Some(site) = discrete(k + 1, &state).map_err(|e| e.at_node(k + 1))? {
            let (s, inc) = apply_site(&state, &site, 1.0).map_err(|e| e.at_node(k + 1))?;
            state = s;
            log_norm += inc;
        }
        check_finite(&state).map_err(|e| e.at_node(k + 1))?;
        path.push(state.clone());
    }
    applied.push(lam);

    if !log_norm.is_finite() {
        return Err(Error::DivergedMoments {
            magnitude: log_norm.abs(),
        });
    }
    Ok(ForwardPassResult {
        path: MarginalPath {
            kind: PathKind::Filtered,
            nodes: path,
        },
        before_discrete: before,
        continuous_sites: applied,
        log_norm,
        psd_repairs: repairs,
    })
}

/// Backward smoothing pass; returns the smoothed path and the number of PSD repairs.
///
/// The filtered path inside a cell is reconstructed by cubic Hermite
/// interpolation between the post-update moments at the left node and the
/// pre-update moments at the right node, with endpoint slopes from the
/// closed forward dynamics plus the continuous-site rate.
pub(crate) fn backward_with(
    closure: &MomentClosure,
    fwd: &ForwardPassResult,
    grid: &TimeGrid,
    eps_psd: f64,
) -> Result<(MarginalPath, usize)> {
    let n = grid.n_steps();
    if fwd.path.len() != n + 1 || fwd.before_discrete.len() != n + 1 || fwd.continuous_sites.len() != n + 1 {
        return Err(Error::Dimension("forward pass does not cover the grid".into()));
    }
    let dt = grid.dt();
    let mut repairs = 0;
    let mut out = vec![fwd.path.nodes[n].clone(); n + 1];

    let slope = |m: &GaussianMoments, lam: &GaussianCanonical| -> MomentDerivative {
        let mut d = closure.forward(m);
        let s = site_rate(m, lam);
        d.dmean += s.dmean;
        d.dcov += s.dcov;
        d
    };

    for k in (0..n).rev() {
        let left = &fwd.path.nodes[k];
        let right = &fwd.before_discrete[k + 1];
        let dl = slope(left, &fwd.continuous_sites[k]);
        let dr = slope(right, &fwd.continuous_sites[k + 1]);
        let mut mid_cov = (&left.cov + &right.cov) * 0.5 + (&dl.dcov - &dr.dcov) * (dt / 8.0);
        symmetrize(&mut mid_cov);
        let mid = GaussianMoments {
            mean: (&left.mean + &right.mean) * 0.5 + (&dl.dmean - &dr.dmean) * (dt / 8.0),
            cov: mid_cov,
        };

        let y = &out[k + 1];
        let next = (|| -> Result<GaussianMoments> {
            let k1 = closure.smoothing(y, right)?;
            let k2 = closure.smoothing(&axpy(y, &k1, -0.5 * dt), &mid)?;
            let k3 = closure.smoothing(&axpy(y, &k2, -0.5 * dt), &mid)?;
            let k4 = closure.smoothing(&axpy(y, &k3, -dt), left)?;
            repaired(axpy(y, &combine(&k1, &k2, &k3, &k4), -dt), eps_psd, &mut repairs)
        })()
        .map_err(|e| e.at_node(k))?;
        out[k] = next;
    }
    Ok((
        MarginalPath {
            kind: PathKind::Smoothed,
            nodes: out,
        },
        repairs,
    ))
}

/// Forward filter under the given sites.
pub fn forward_pass(
    spec: &SdeSpec,
    sites: &SiteSet,
    init: &GaussianMoments,
    grid: &TimeGrid,
) -> Result<ForwardPassResult> {
    let closure = MomentClosure::new(spec)?;
    forward_pass_with(&closure, sites, init, grid, EPS_PSD)
}

pub fn forward_pass_with(
    closure: &MomentClosure,
    sites: &SiteSet,
    init: &GaussianMoments,
    grid: &TimeGrid,
    eps_psd: f64,
) -> Result<ForwardPassResult> {
    sites.validate(grid)?;
    let mut next_discrete = sites.discrete.iter().peekable();
    forward_with(
        closure,
        init,
        grid,
        eps_psd,
        |k, _| Ok(sites.continuous[k].clone()),
        |k, _| {
            Ok(match next_discrete.peek() {
                Some((node, _)) if *node == k => next_discrete.next().map(|(_, s)| s.clone()),
                _ => None,
            })
        },
    )
}

/// Smoothed marginals from a completed forward pass.
pub fn backward_pass(spec: &SdeSpec, fwd: &ForwardPassResult, grid: &TimeGrid) -> Result<MarginalPath> {
    let closure = MomentClosure::new(spec)?;
    Ok(backward_with(&closure, fwd, grid, EPS_PSD)?.0)
}
