//! Observation models and continuous-time losses.
//!
//! Discrete observations enter EP through tilted moments against a Gaussian
//! cavity; continuous losses enter through their expectation under the
//! current marginal and the gradient of that expectation with respect to the
//! mean parameters `(mean, -½ E[xxᵀ])`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, log_det, GaussianCanonical, GaussianMoments};
use crate::quadrature::GaussHermite;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Default Gauss-Hermite order per dimension.
pub const DEFAULT_QUADRATURE_ORDER: usize = 32;

/// How the variance of log-normal noise is interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogNormalParam {
    /// `E[y|x] = x`, `Var[y|x] = v`.
    #[default]
    MeanVariance,
    /// `y = x·exp(ε)` with `ε ~ N(0, v)`.
    LogScale,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DiscreteObsModel {
    /// `y = x + ε`, `ε ~ N(0, r)`.
    Gaussian { r: DMatrix<f64> },
    /// Independent log-normal noise per component.
    LogNormal { variance: f64, param: LogNormalParam },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub value: DVector<f64>,
}

impl Observation {
    pub fn new(time: f64, value: DVector<f64>) -> Self {
        Self { time, value }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TiltedMoments {
    pub moments: GaussianMoments,
    /// `log ∫ p(y|x) exp(η·f(x)) dx`.
    pub log_partition: f64,
}

impl DiscreteObsModel {
    pub fn gaussian(r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != r.ncols() {
            return Err(Error::Dimension("observation covariance must be square".into()));
        }
        cholesky(&r, "observation covariance")?;
        Ok(Self::Gaussian { r })
    }

    pub fn log_normal(variance: f64) -> Result<Self> {
        Self::log_normal_with(variance, LogNormalParam::MeanVariance)
    }

    pub fn log_normal_with(variance: f64, param: LogNormalParam) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "log-normal variance must be positive, got {variance}"
            )));
        }
        Ok(Self::LogNormal { variance, param })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Self::Gaussian { r } if r.nrows() != dim => Err(Error::Dimension(format!(
                "observation covariance is {}x{} for a {dim}-dimensional state",
                r.nrows(),
                r.ncols()
            ))),
            _ => Ok(()),
        }
    }

    pub fn check_observation(&self, y: &Observation) -> Result<()> {
        if y.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite observation at t = {}",
                y.time
            )));
        }
        if matches!(self, Self::LogNormal { .. }) && y.value.iter().any(|v| *v <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "log-normal observation at t = {} must be positive",
                y.time
            )));
        }
        Ok(())
    }

    /// `log p(y | x)`; `-∞` where the log-normal mean is non-positive.
    pub fn log_likelihood(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        match self {
            Self::Gaussian { r } => {
                let chol = cholesky(r, "observation covariance").expect("validated at construction");
                let diff = y - x;
                let sol = chol.solve(&diff);
                -0.5 * diff.dot(&sol) - 0.5 * log_det(&chol) - 0.5 * y.len() as f64 * LN_2PI
            }
            Self::LogNormal { variance, param } => y
                .iter()
                .zip(x.iter())
                .map(|(yi, xi)| log_normal_log_density(*yi, *xi, *variance, *param))
                .sum(),
        }
    }

    /// Draw one observation of state `x`.
    ///
    /// Log-normal noise needs a positive mean; states at or below zero are
    /// observed as if they were `1e-3`.
    pub fn sample<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Gaussian { r } => {
                let chol = cholesky(r, "observation covariance").expect("validated at construction");
                let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                x + chol.l() * z
            }
            Self::LogNormal { variance, param } => x.map(|xi| {
                let xi = xi.max(1e-3);
                let (mu, s2) = log_normal_params(xi, *variance, *param);
                let z: f64 = rng.sample(StandardNormal);
                (mu + s2.sqrt() * z).exp()
            }),
        }
    }
}

fn log_normal_params(x: f64, v: f64, param: LogNormalParam) -> (f64, f64) {
    match param {
        LogNormalParam::MeanVariance => {
            let s2 = (v / (x * x)).ln_1p();
            (x.ln() - 0.5 * s2, s2)
        }
        LogNormalParam::LogScale => (x.ln(), v),
    }
}

fn log_normal_log_density(y: f64, x: f64, v: f64, param: LogNormalParam) -> f64 {
    if !(x > 0.0) || !(y > 0.0) {
        return f64::NEG_INFINITY;
    }
    let (mu, s2) = log_normal_params(x, v, param);
    let ly = y.ln();
    -(ly - mu).powi(2) / (2.0 * s2) - ly - 0.5 * (LN_2PI + s2.ln())
}

/// Density of a log-normal in `y` with mean `x` and variance `v`.
pub fn log_normal_density(y: f64, x: f64, v: f64) -> Result<f64> {
    if !(y > 0.0) || !(x > 0.0) || !(v > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log-normal density needs y, x, v > 0 (got {y}, {x}, {v})"
        )));
    }
    Ok(log_normal_log_density(y, x, v, LogNormalParam::MeanVariance).exp())
}

/// Moments and log-normalizer of `p(y|x)·exp(cavity·f(x))`.
pub fn tilted_moments(model: &DiscreteObsModel, y: &Observation, cavity: &GaussianCanonical) -> Result<TiltedMoments> {
    tilted_moments_with_order(model, y, cavity, DEFAULT_QUADRATURE_ORDER)
}

pub fn tilted_moments_with_order(
    model: &DiscreteObsModel,
    y: &Observation,
    cavity: &GaussianCanonical,
    order: usize,
) -> Result<TiltedMoments> {
    let d = cavity.dim();
    if y.value.len() != d {
        return Err(Error::Dimension(format!(
            "observation of length {} for a {d}-dimensional state",
            y.value.len()
        )));
    }
    let cav_chol = cholesky(&cavity.j, "cavity").map_err(|_| Error::ImproperCavity)?;
    match model {
        DiscreteObsModel::Gaussian { r } => {
            let r_chol = cholesky(r, "observation covariance")?;
            let r_inv = r_chol.inverse();
            let site = GaussianCanonical {
                h: &r_inv * &y.value,
                j: r_inv,
            };
            let tilted = cavity.add_site(&site, 1.0);
            let log_partition =
                tilted.log_partition()? - 0.5 * y.value.dot(&site.h) - 0.5 * log_det(&r_chol) - 0.5 * d as f64 * LN_2PI;
            Ok(TiltedMoments {
                moments: tilted.to_moments()?,
                log_partition,
            })
        }
        DiscreteObsModel::LogNormal { .. } => {
            let cav_cov = cav_chol.inverse();
            let cav_mean = cav_chol.solve(&cavity.h);
            let cav = GaussianMoments {
                mean: cav_mean,
                cov: cav_cov,
            };
            let (moments, log_mass) = quadrature_tilt(model, &y.value, &cav, &cavity.j, order)?;
            Ok(TiltedMoments {
                moments,
                log_partition: cavity.log_partition()? + log_mass,
            })
        }
    }
}

/// Whitened coordinate beyond which a positivity boundary is ignored by the
/// Gauss-Hermite rule (`e^{-36}` of the weight lies past it).
const GH_BOUNDARY_CUTOFF: f64 = 6.0;

/// Upper truncation of half-line rules in whitened units.
const HALF_LINE_END: f64 = 16.0;

/// Largest node spacing of the tanh-sinh rule near the middle of its interval,
/// and the half-width of the rule in the transformed variable.
const TANH_SINH_SPACING: f64 = 0.5;
const TANH_SINH_SPAN: f64 = 2.5;

/// Tanh-sinh rule for `∫_c^{HALF_LINE_END} e^{-z²} g(z) dz` as `(node, log weight)`.
/// Double-exponential clustering keeps it accurate when `g` has a kink at `c`.
fn half_line_rule(c: f64) -> Vec<(f64, f64)> {
    let (a, b) = (c, HALF_LINE_END);
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let p2 = std::f64::consts::FRAC_PI_2;
    let step = (TANH_SINH_SPACING / (half * p2)).min(1.0 / 16.0);
    let n = (TANH_SINH_SPAN / step).ceil() as i64;
    (-n..=n)
        .filter_map(|k| {
            let t = k as f64 * step;
            let u = p2 * t.sinh();
            let z = mid + half * u.tanh();
            let w = step * half * p2 * t.cosh() / u.cosh().powi(2);
            (z > a && z < b && w > 0.0).then(|| (z, w.ln() - z * z))
        })
        .collect()
}

struct TiltAccumulator<'a> {
    y: &'a DVector<f64>,
    variance: f64,
    param: LogNormalParam,
    center: &'a DVector<f64>,
    /// `√2·L` with `L` the proposal's Cholesky factor.
    scaled_l: DMatrix<f64>,
    cav_mean: &'a DVector<f64>,
    cav_prec: &'a DMatrix<f64>,
    log_const: f64,
    gh: &'a GaussHermite,
    z: Vec<f64>,
    x: Vec<f64>,
    points: Vec<(DVector<f64>, f64)>,
}

impl TiltAccumulator<'_> {
    /// Nested product rule over `x = c + √2·L·z`, one whitened coordinate at a time.
    ///
    /// With a triangular `L`, `x_i > 0` is a lower bound on `z_i` given the outer
    /// coordinates. Far bounds are left to Gauss-Hermite; near ones switch that
    /// coordinate to a truncated half-line rule so the likelihood's edge at zero
    /// is resolved.
    fn recurse(&mut self, i: usize, logw: f64) {
        let d = self.center.len();
        if i == d {
            let x = DVector::from_column_slice(&self.x);
            let r = &x - self.cav_mean;
            let z2: f64 = self.z.iter().map(|z| z * z).sum();
            // rule weights carry e^{-|z|²}; trade it for the cavity density
            let w = logw + z2 - 0.5 * r.dot(&(self.cav_prec * &r)) + self.log_const;
            self.points.push((x, w));
            return;
        }
        let offset = self.center[i] + (0..i).map(|j| self.scaled_l[(i, j)] * self.z[j]).sum::<f64>();
        let scale = self.scaled_l[(i, i)];
        let c = -offset / scale;
        let rule: Vec<(f64, f64)> = if c < -GH_BOUNDARY_CUTOFF {
            self.gh
                .nodes
                .iter()
                .zip(&self.gh.weights)
                .map(|(z, w)| (*z, w.ln()))
                .collect()
        } else if c < HALF_LINE_END {
            half_line_rule(c)
        } else {
            return;
        };
        for (z, lw) in rule {
            let x = offset + scale * z;
            let ll = log_normal_log_density(self.y[i], x, self.variance, self.param);
            if ll == f64::NEG_INFINITY {
                continue;
            }
            self.z[i] = z;
            self.x[i] = x;
            self.recurse(i + 1, logw + lw + ll);
        }
    }
}

/// Moments of the tilted distribution for independent log-normal noise.
/// Returns tilted moments and `log E_cav[p(y|x)]`.
///
/// Adaptive quadrature: the product rule is laid out on a Gaussian fitted to
/// the tilted density at its mode (falling back to the cavity itself), and
/// each node carries the exact ratio of tilted density to that Gaussian. A
/// likelihood much narrower than the cavity is then still resolved.
fn quadrature_tilt(
    model: &DiscreteObsModel,
    y: &DVector<f64>,
    cav: &GaussianMoments,
    cav_prec: &DMatrix<f64>,
    order: usize,
) -> Result<(GaussianMoments, f64)> {
    let DiscreteObsModel::LogNormal { variance, param } = *model else {
        return Err(Error::InvalidArgument(
            "quadrature tilt needs a log-normal model".into(),
        ));
    };
    let d = cav.dim();
    let gh = GaussHermite::cached(order);
    let prec_chol = cholesky(cav_prec, "cavity precision")?;
    let (center, chol) = match laplace_proposal(y, variance, param, cav, cav_prec) {
        Some(p) => p,
        None => (cav.mean.clone(), cholesky(&cav.cov, "cavity covariance")?),
    };
    let scaled_l = chol.l() * std::f64::consts::SQRT_2;
    let log_jacobian = scaled_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut acc = TiltAccumulator {
        y,
        variance,
        param,
        center: &center,
        scaled_l,
        cav_mean: &cav.mean,
        cav_prec,
        // log N(x; cavity) without the quadratic form, plus the change of variables
        log_const: 0.5 * log_det(&prec_chol) - 0.5 * d as f64 * LN_2PI + log_jacobian,
        gh: &gh,
        z: vec![0.0; d],
        x: vec![0.0; d],
        points: Vec::new(),
    };
    acc.recurse(0, 0.0);
    let points = acc.points;

    let max = points.iter().map(|(_, w)| *w).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::QuadratureUnderflow);
    }
    let weights: Vec<f64> = points.iter().map(|(_, w)| (w - max).exp()).collect();
    let mass: f64 = weights.iter().sum();
    let mean = points
        .iter()
        .zip(&weights)
        .fold(DVector::zeros(d), |acc, ((x, _), w)| acc + x * *w)
        / mass;
    let cov = points
        .iter()
        .zip(&weights)
        .fold(DMatrix::zeros(d, d), |acc, ((x, _), w)| {
            let c = x - &mean;
            acc + &c * c.transpose() * *w
        })
        / mass;
    let log_mass = max + mass.ln();
    let mut moments = GaussianMoments { mean, cov };
    crate::gaussian::symmetrize(&mut moments.cov);
    Ok((moments, log_mass))
}

const LAPLACE_MAX_ITER: usize = 100;
const LAPLACE_MAX_HALVINGS: usize = 40;

/// Value, first and second derivative of `log p(y|x)` in one coordinate, by
/// central differences on a relative step.
fn log_lik_derivatives(y: f64, x: f64, v: f64, param: LogNormalParam) -> (f64, f64, f64) {
    let h = 1e-4 * x;
    let f = |t| log_normal_log_density(y, t, v, param);
    let (lo, mid, hi) = (f(x - h), f(x), f(x + h));
    (mid, (hi - lo) / (2.0 * h), (hi - 2.0 * mid + lo) / (h * h))
}

/// Mode of the tilted density and the Cholesky factor of its negative inverse
/// Hessian (with convex likelihood curvature clipped to zero), by damped Newton.
/// `None` if the iteration leaves the positive orthant or produces non-finite values.
fn laplace_proposal(
    y: &DVector<f64>,
    v: f64,
    param: LogNormalParam,
    cav: &GaussianMoments,
    prec: &DMatrix<f64>,
) -> Option<(DVector<f64>, Cholesky<f64, Dyn>)> {
    let d = y.len();
    let objective = |x: &DVector<f64>| -> f64 {
        if x.iter().any(|t| !(*t > 0.0)) {
            return f64::NEG_INFINITY;
        }
        let r = x - &cav.mean;
        let ll: f64 = (0..d).map(|i| log_normal_log_density(y[i], x[i], v, param)).sum();
        ll - 0.5 * r.dot(&(prec * &r))
    };
    let curvature = |x: &DVector<f64>| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut grad = -(prec * (x - &cav.mean));
        let mut neg_hess = prec.clone();
        for i in 0..d {
            let (_, g1, g2) = log_lik_derivatives(y[i], x[i], v, param);
            grad[i] += g1;
            neg_hess[(i, i)] -= g2.min(0.0);
        }
        (grad.iter().all(|g| g.is_finite()) && neg_hess.iter().all(|h| h.is_finite())).then_some((grad, neg_hess))
    };

    // start from the observations, which sit inside the likelihood's bulk
    let mut x = y.clone();
    let mut fx = objective(&x);
    if !fx.is_finite() {
        return None;
    }
    for _ in 0..LAPLACE_MAX_ITER {
        let (grad, neg_hess) = curvature(&x)?;
        let chol = Cholesky::new(neg_hess)?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..LAPLACE_MAX_HALVINGS {
            let cand = &x + &step * t;
            let fc = objective(&cand);
            if fc.is_finite() && fc >= fx {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        // converged once the Newton step is negligible against the proposal's spread
        let spread = chol.inverse().diagonal().map(f64::sqrt);
        let small = (0..d).all(|i| (step[i] * t).abs() <= 1e-9 * spread[i].max(f64::MIN_POSITIVE));
        if !accepted || small {
            break;
        }
    }
    let (_, neg_hess) = curvature(&x)?;
    let cov_chol = Cholesky::new(Cholesky::new(neg_hess)?.inverse())?;
    Some((x, cov_chol))
}

/// Quartic penalty `a (x_dim - b)⁴` active on `window`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuarticTerm {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
    pub window: (f64, f64),
}

impl QuarticTerm {
    fn active(&self, t: f64) -> bool {
        t >= self.window.0 && t <= self.window.1
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub enum ContinuousLoss {
    #[default]
    None,
    /// `U(x) = ½xᵀAx - cᵀx`.
    Quadratic {
        a: DMatrix<f64>,
        c: DVector<f64>,
    },
    Quartic(Vec<QuarticTerm>),
}

impl ContinuousLoss {
    pub fn validate(&self, dim: usize, t0: f64, t1: f64) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Quadratic { a, c } => {
                if a.nrows() != dim || a.ncols() != dim || c.len() != dim {
                    return Err(Error::Dimension("quadratic loss dimensions".into()));
                }
                let shifted = a + DMatrix::identity(dim, dim) * (1e-12 * a.amax().max(1.0));
                cholesky(&shifted, "quadratic loss matrix")
                    .map(|_| ())
                    .map_err(|_| Error::InvalidArgument("quadratic loss matrix must be PSD".into()))
            }
            Self::Quartic(terms) => {
                for q in terms {
                    if q.dim >= dim {
                        return Err(Error::Dimension(format!("quartic term on component {}", q.dim)));
                    }
                    if !(q.a >= 0.0) {
                        return Err(Error::InvalidArgument(
                            "quartic coefficient must be non-negative".into(),
                        ));
                    }
                    if q.window.0 > q.window.1 || q.window.0 < t0 || q.window.1 > t1 {
                        return Err(Error::InvalidArgument(format!(
                            "quartic window {:?} not inside [{t0}, {t1}]",
                            q.window
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_none(&self) -> bool {
        match self {
            Self::None => true,
            Self::Quartic(terms) => terms.iter().all(|q| q.a == 0.0),
            Self::Quadratic { a, c } => a.iter().chain(c.iter()).all(|v| *v == 0.0),
        }
    }
}

/// `⟨U(x, t)⟩` under `m`.
pub fn expected_loss(loss: &ContinuousLoss, m: &GaussianMoments, t: f64) -> f64 {
    match loss {
        ContinuousLoss::None => 0.0,
        ContinuousLoss::Quadratic { a, c } => {
            0.5 * a.component_mul(&m.cov).sum() + 0.5 * m.mean.dot(&(a * &m.mean)) - c.dot(&m.mean)
        }
        ContinuousLoss::Quartic(terms) => terms
            .iter()
            .filter(|q| q.active(t))
            .map(|q| {
                let u = m.mean[q.dim] - q.b;
                let s2 = m.cov[(q.dim, q.dim)];
                q.a * (u.powi(4) + 6.0 * u * u * s2 + 3.0 * s2 * s2)
            })
            .sum(),
    }
}

/// `λ_t = -∂⟨U⟩/∂μ` with `μ = (mean, -½ E[xxᵀ])`.
pub fn continuous_site_update(loss: &ContinuousLoss, m: &GaussianMoments, t: f64) -> GaussianCanonical {
    let d = m.dim();
    match loss {
        ContinuousLoss::None => GaussianCanonical::zeros(d),
        ContinuousLoss::Quadratic { a, c } => GaussianCanonical {
            h: c.clone(),
            j: a.clone(),
        },
        ContinuousLoss::Quartic(terms) => {
            let mut site = GaussianCanonical::zeros(d);
            for q in terms.iter().filter(|q| q.active(t) && q.a != 0.0) {
                let i = q.dim;
                let mean = m.mean[i];
                let u = mean - q.b;
                let s2 = m.cov[(i, i)];
                // F(u, σ²) = u⁴ + 6u²σ² + 3σ⁴ with σ² = E[x²] - mean²
                let f_s = 6.0 * u * u + 6.0 * s2;
                let f_mean = 4.0 * u.powi(3) + 12.0 * u * s2 - 2.0 * mean * f_s;
                site.h[i] -= q.a * f_mean;
                site.j[(i, i)] += 2.0 * q.a * f_s;
            }
            site
        }
    }
}

/// Site obtained by projecting `exp(-U)` against a flat base measure, when proper.
pub fn initial_continuous_site(loss: &ContinuousLoss, dim: usize) -> GaussianCanonical {
    match loss {
        ContinuousLoss::Quadratic { a, c } => GaussianCanonical {
            h: c.clone(),
            j: a.clone(),
        },
        _ => GaussianCanonical::zeros(dim),
    }
}

/// `Project[p(y|x)·exp(ξ·f)] - ξ` for a flat `ξ`; zero when the projection is improper.
pub fn initial_discrete_site(
    model: &DiscreteObsModel,
    y: &Observation,
    flat: &GaussianCanonical,
) -> Result<GaussianCanonical> {
    match model {
        DiscreteObsModel::Gaussian { .. } => {
            let tilted = tilted_moments(model, y, flat)?;
            Ok(tilted.moments.to_canonical()?.sub(flat))
        }
        DiscreteObsModel::LogNormal { .. } => Ok(GaussianCanonical::zeros(flat.dim())),
    }
}
