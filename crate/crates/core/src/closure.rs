//! Normal (cumulant-neglect) moment closure.
//!
//! Expectations of polynomials under `N(mean, cov)` are exact: raw moments are
//! generated by the Gaussian integration-by-parts identity
//! `E[x_i g(x)] = mean_i E[g] + Σ_j cov_ij E[∂_j g]`, which is Isserlis' pairing
//! rule applied one factor at a time. [`MomentClosure`] precompiles the drift
//! and diffusion of an [`SdeSpec`] against a dense table of raw moments so the
//! ODE right-hand sides cost a few dot products per evaluation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::{cholesky, GaussianMoments};
use crate::polynomial::PolynomialMap;
use crate::process::SdeSpec;

const MAX_TABLE: usize = 1 << 22;

/// Time derivative of `(mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentDerivative {
    pub dmean: DVector<f64>,
    pub dcov: DMatrix<f64>,
}

impl MomentDerivative {
    pub fn zeros(d: usize) -> Self {
        Self {
            dmean: DVector::zeros(d),
            dcov: DMatrix::zeros(d, d),
        }
    }
}

struct Entry {
    code: usize,
    pivot: usize,
    parent: usize,
    /// `(j, β_j, code(β - e_j))` for every `j` with `β_j > 0`, where `β` is the parent index.
    lowered: Vec<(usize, f64, usize)>,
}

/// All multi-indices of total degree `≤ max_degree`, coded in mixed radix
/// `max_degree + 1` so that adding codes adds exponent vectors.
pub(crate) struct MonomialIndex {
    dim: usize,
    radix: usize,
    size: usize,
    entries: Vec<Entry>,
}

impl MonomialIndex {
    pub(crate) fn new(dim: usize, max_degree: u32) -> Result<Self> {
        let radix = max_degree as usize + 1;
        let size = radix
            .checked_pow(dim as u32)
            .filter(|s| *s <= MAX_TABLE)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "moment table for degree {max_degree} in {dim} dimensions is too large"
                ))
            })?;
        let mut index = Self {
            dim,
            radix,
            size,
            entries: Vec::new(),
        };
        let mut exps = Vec::new();
        enumerate(dim, max_degree, &mut vec![0; dim], 0, &mut exps);
        exps.sort_by_key(|e| e.iter().sum::<u32>());
        for e in exps.into_iter().filter(|e| e.iter().any(|k| *k > 0)) {
            let pivot = e.iter().position(|k| *k > 0).unwrap();
            let mut beta = e.clone();
            beta[pivot] -= 1;
            let lowered = (0..dim)
                .filter(|j| beta[*j] > 0)
                .map(|j| {
                    let mut g = beta.clone();
                    g[j] -= 1;
                    (j, beta[j] as f64, index.code(&g))
                })
                .collect();
            index.entries.push(Entry {
                code: index.code(&e),
                pivot,
                parent: index.code(&beta),
                lowered,
            });
        }
        Ok(index)
    }

    pub(crate) fn code(&self, e: &[u32]) -> usize {
        e.iter().rev().fold(0, |acc, k| acc * self.radix + *k as usize)
    }

    pub(crate) fn unit(&self, i: usize) -> usize {
        self.radix.pow(i as u32)
    }

    /// Raw moments `E[x^α]` for every `|α| ≤ max_degree`, indexed by code.
    pub(crate) fn moments(&self, m: &GaussianMoments) -> Vec<f64> {
        debug_assert_eq!(m.dim(), self.dim);
        let mut vals = vec![0.0; self.size];
        vals[0] = 1.0;
        for e in &self.entries {
            let mut v = m.mean[e.pivot] * vals[e.parent];
            for &(j, bj, c) in &e.lowered {
                v += m.cov[(e.pivot, j)] * bj * vals[c];
            }
            vals[e.code] = v;
        }
        vals
    }
}

fn enumerate(dim: usize, budget: u32, cur: &mut Vec<u32>, pos: usize, out: &mut Vec<Vec<u32>>) {
    if pos == dim {
        out.push(cur.clone());
        return;
    }
    for k in 0..=budget {
        cur[pos] = k;
        enumerate(dim, budget - k, cur, pos + 1, out);
    }
    cur[pos] = 0;
}

/// Polynomial with exponent vectors replaced by table codes.
#[derive(Clone, Debug, Default)]
pub(crate) struct CompiledPoly(Vec<(f64, usize)>);

impl CompiledPoly {
    pub(crate) fn new(p: &PolynomialMap, index: &MonomialIndex) -> Self {
        Self(p.terms().map(|(c, e)| (c, index.code(e))).collect())
    }

    /// `E[p(x) · x^shift]` where `shift` is a code.
    #[inline]
    pub(crate) fn expect(&self, vals: &[f64], shift: usize) -> f64 {
        self.0.iter().map(|(c, code)| c * vals[code + shift]).sum()
    }
}

/// `E[p(x)]` under `N(m.mean, m.cov)`, exact for any polynomial.
pub fn gaussian_expectation(p: &PolynomialMap, m: &GaussianMoments) -> f64 {
    let index = MonomialIndex::new(p.dim(), p.degree()).expect("polynomial degree within table limits");
    let vals = index.moments(m);
    CompiledPoly::new(p, &index).expect(&vals, 0)
}

/// Gaussian-closed forward and smoothing moment equations for one SDE.
pub struct MomentClosure {
    dim: usize,
    index: MonomialIndex,
    drift: Vec<CompiledPoly>,
    diffusion: Vec<Vec<CompiledPoly>>,
    /// `Σ_k ∂_k b_lk`
    divergence: Vec<CompiledPoly>,
    units: Vec<usize>,
}

impl MomentClosure {
    pub fn new(spec: &SdeSpec) -> Result<Self> {
        let d = spec.dim();
        let deg_a = spec.drift().iter().map(|p| p.degree()).max().unwrap_or(0);
        let deg_b = spec.diffusion().iter().flatten().map(|p| p.degree()).max().unwrap_or(0);
        // smoothing needs E[b x_m x_n] and E[a x_m]
        let index = MonomialIndex::new(d, (deg_a + 1).max(deg_b + 2))?;
        let drift = spec.drift().iter().map(|p| CompiledPoly::new(p, &index)).collect();
        let diffusion = spec
            .diffusion()
            .iter()
            .map(|row| row.iter().map(|p| CompiledPoly::new(p, &index)).collect())
            .collect();
        let divergence = (0..d)
            .map(|l| {
                let div = (0..d).fold(PolynomialMap::zero(d), |acc, k| {
                    &acc + &spec.diffusion()[l][k].derivative(k)
                });
                CompiledPoly::new(&div, &index)
            })
            .collect();
        let units = (0..d).map(|i| index.unit(i)).collect();
        Ok(Self {
            dim: d,
            index,
            drift,
            diffusion,
            divergence,
            units,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `dmean = ⟨a⟩`, `dcov = ⟨(x-mean) aᵀ⟩ + ⟨a (x-mean)ᵀ⟩ + ⟨b⟩`.
    pub fn forward(&self, m: &GaussianMoments) -> MomentDerivative {
        let d = self.dim;
        let vals = self.index.moments(m);
        let ea = DVector::from_iterator(d, self.drift.iter().map(|p| p.expect(&vals, 0)));
        // cross[i][j] = E[a_i x_j] - E[a_i] mean_j
        let cross = DMatrix::from_fn(d, d, |i, j| {
            self.drift[i].expect(&vals, self.units[j]) - ea[i] * m.mean[j]
        });
        let mut dcov = DMatrix::from_fn(d, d, |i, j| self.diffusion[i][j].expect(&vals, 0));
        dcov += &cross + cross.transpose();
        MomentDerivative { dmean: ea, dcov }
    }

    /// Closed smoothing equation with `∂ log q_fw(x) = -cov_fw⁻¹ (x - mean_fw)`.
    pub fn smoothing(&self, ms: &GaussianMoments, mfw: &GaussianMoments) -> Result<MomentDerivative> {
        let d = self.dim;
        let g = cholesky(&mfw.cov, "filtered covariance")?.inverse();
        let vals = self.index.moments(ms);
        let u = &self.units;

        // E[p w_k] with w_k = -Σ_n G_kn (x_n - mfw_n), optionally times x^shift
        let e_w = |p: &CompiledPoly, k: usize, shift: usize| -> f64 {
            let base = p.expect(&vals, shift);
            -(0..d)
                .map(|n| g[(k, n)] * (p.expect(&vals, shift + u[n]) - mfw.mean[n] * base))
                .sum::<f64>()
        };

        let mut dmean = DVector::zeros(d);
        for l in 0..d {
            let mut v = self.drift[l].expect(&vals, 0) - self.divergence[l].expect(&vals, 0);
            for k in 0..d {
                v -= e_w(&self.diffusion[l][k], k, 0);
            }
            dmean[l] = v;
        }

        // derivative of the raw second moment E[x_l x_m]
        let mut ds = DMatrix::zeros(d, d);
        for l in 0..d {
            for m in l..d {
                let mut v = self.drift[l].expect(&vals, u[m]) + self.drift[m].expect(&vals, u[l])
                    - self.divergence[l].expect(&vals, u[m])
                    - self.divergence[m].expect(&vals, u[l])
                    - self.diffusion[l][m].expect(&vals, 0);
                for k in 0..d {
                    v -= e_w(&self.diffusion[l][k], k, u[m]) + e_w(&self.diffusion[m][k], k, u[l]);
                }
                ds[(l, m)] = v;
                ds[(m, l)] = v;
            }
        }
        let outer = &dmean * ms.mean.transpose();
        let dcov = ds - &outer - outer.transpose();
        Ok(MomentDerivative { dmean, dcov })
    }
}

pub fn forward_rhs(spec: &SdeSpec, m: &GaussianMoments) -> Result<MomentDerivative> {
    Ok(MomentClosure::new(spec)?.forward(m))
}

pub fn smoothing_rhs(spec: &SdeSpec, m_smooth: &GaussianMoments, m_fw: &GaussianMoments) -> Result<MomentDerivative> {
    MomentClosure::new(spec)?.smoothing(m_smooth, m_fw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::builtin_ou;
    use approx::assert_relative_eq;

    fn moments(mean: &[f64], cov: &[f64]) -> GaussianMoments {
        let d = mean.len();
        GaussianMoments::new(DVector::from_row_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
    }

    #[test]
    fn low_order_expectations() {
        let m = moments(&[1.5, -2.0], &[2.0, 0.3, 0.3, 0.5]);
        assert_relative_eq!(gaussian_expectation(&PolynomialMap::variable(2, 0), &m), 1.5);
        let x1x2 = PolynomialMap::monomial(2, 1.0, vec![1, 1]);
        assert_relative_eq!(gaussian_expectation(&x1x2, &m), 0.3 - 3.0, epsilon = 1e-14);
        let m1 = moments(&[3.0], &[0.25]);
        let sq = PolynomialMap::monomial(1, 1.0, vec![2]);
        assert_relative_eq!(gaussian_expectation(&sq, &m1), 9.25, epsilon = 1e-14);
    }

    #[test]
    fn centered_fourth_power() {
        let (mu, var, b) = (1.3, 0.7, -0.4);
        let x = PolynomialMap::variable(1, 0);
        let shifted = &x - &PolynomialMap::constant(1, b);
        let sq = &shifted * &shifted;
        let p = &sq * &sq;
        let u = mu - b;
        let expected = u.powi(4) + 6.0 * u * u * var + 3.0 * var * var;
        assert_relative_eq!(
            gaussian_expectation(&p, &moments(&[mu], &[var])),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ou_forward_is_lyapunov() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, -0.2, -0.7]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.4]);
        let spec = builtin_ou(&a, &b).unwrap();
        let m = moments(&[0.3, -1.2], &[0.9, 0.2, 0.2, 0.6]);
        let der = forward_rhs(&spec, &m).unwrap();
        assert_relative_eq!(der.dmean, &a * &m.mean, epsilon = 1e-13);
        let expected = &a * &m.cov + &m.cov * a.transpose() + &b;
        assert_relative_eq!(der.dcov, expected, epsilon = 1e-13);
    }

    #[test]
    fn zero_dynamics() {
        let z = PolynomialMap::zero(2);
        let spec = SdeSpec::new(
            vec![z.clone(), z.clone()],
            vec![vec![z.clone(), z.clone()], vec![z.clone(), z]],
        )
        .unwrap();
        let m = moments(&[1.0, 2.0], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(forward_rhs(&spec, &m).unwrap(), MomentDerivative::zeros(2));
        assert_eq!(smoothing_rhs(&spec, &m, &m).unwrap().dmean.amax(), 0.0);
    }

    #[test]
    fn ou_smoothing_matches_rts_ode() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, -0.2, -0.7]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.4]);
        let spec = builtin_ou(&a, &b).unwrap();
        let ms = moments(&[0.3, -1.2], &[0.5, 0.1, 0.1, 0.3]);
        let mf = moments(&[0.1, -0.9], &[0.8, 0.2, 0.2, 0.6]);
        let der = smoothing_rhs(&spec, &ms, &mf).unwrap();
        let pinv = mf.cov.clone().try_inverse().unwrap();
        let k = &a + &b * &pinv;
        let dm = &a * &ms.mean + &b * &pinv * (&ms.mean - &mf.mean);
        let dp = &k * &ms.cov + &ms.cov * k.transpose() - &b;
        assert_relative_eq!(der.dmean, dm, epsilon = 1e-12);
        assert_relative_eq!(der.dcov, dp, epsilon = 1e-12);
    }

    #[test]
    fn smoothing_without_diffusion_keeps_drift_only() {
        // nonlinear drift, b = 0
        let d = 2;
        let drift = vec![
            PolynomialMap::from_terms(d, vec![(1.0, vec![1, 0]), (-0.1, vec![1, 1])]).unwrap(),
            PolynomialMap::from_terms(d, vec![(0.1, vec![1, 1]), (-0.5, vec![0, 1])]).unwrap(),
        ];
        let z = PolynomialMap::zero(d);
        let spec = SdeSpec::new(drift, vec![vec![z.clone(), z.clone()], vec![z.clone(), z]]).unwrap();
        let ms = moments(&[2.0, 1.0], &[0.3, 0.05, 0.05, 0.2]);
        let mf = moments(&[1.5, 1.2], &[0.5, 0.0, 0.0, 0.5]);
        let sm = smoothing_rhs(&spec, &ms, &mf).unwrap();
        let fw = forward_rhs(&spec, &ms).unwrap();
        assert_relative_eq!(sm.dmean, fw.dmean, epsilon = 1e-13);
        assert_relative_eq!(sm.dcov, fw.dcov, epsilon = 1e-13);
    }

    #[test]
    fn smoothing_at_stationary_prior_is_still() {
        // 1-D OU dx = -x dt + dW, stationary N(0, 1/2); no data means filtered = smoothed
        let spec = builtin_ou(&-DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap();
        let st = moments(&[0.0], &[0.5]);
        let der = smoothing_rhs(&spec, &st, &st).unwrap();
        assert!(der.dmean.amax() <= 1e-8);
        assert!(der.dcov.amax() <= 1e-8);
    }

    #[test]
    fn smoothing_equals_forward_when_filtered_is_exact_marginal() {
        // With q_fw equal to the smoothed marginal and no data, the smoothing
        // equation must reproduce the forward moment flow, state-dependent b included.
        let spec = crate::process::cle_from_mjp(&crate::process::builtin_lotka_volterra());
        let m = moments(&[100.0, 50.0], &[25.0, 3.0, 3.0, 25.0]);
        let sm = smoothing_rhs(&spec, &m, &m).unwrap();
        let fw = forward_rhs(&spec, &m).unwrap();
        assert_relative_eq!(sm.dmean, fw.dmean, epsilon = 1e-9, max_relative = 1e-10);
        assert_relative_eq!(sm.dcov, fw.dcov, epsilon = 1e-8, max_relative = 1e-10);
    }

    #[test]
    fn table_too_large_is_rejected() {
        assert!(MonomialIndex::new(12, 8).is_err());
    }
}
