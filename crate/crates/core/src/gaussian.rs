//! Multivariate Gaussian as an exponential family with sufficient statistic
//! `f(x) = (x, -x xᵀ/2)`.
//!
//! Two parameterizations are kept side by side: [`GaussianMoments`] (mean and
//! covariance) and [`GaussianCanonical`] (`h`, `J`) with the pairing
//! `λ·f(x) = hᵀx - ½ xᵀJx`. Site parameters are differences of canonicals and
//! may have indefinite `J`; only conversions back to moments require `J ≻ 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalue floor used when repairing covariances produced by ODE integration.
pub const EPS_PSD: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCanonical {
    pub h: DVector<f64>,
    pub j: DMatrix<f64>,
}

/// Cholesky factorization that refuses non-finite input instead of producing NaN.
pub(crate) fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonPositiveDefinite(what));
    }
    let chol = Cholesky::new(m.clone()).ok_or(Error::NonPositiveDefinite(what))?;
    if chol.l_dirty().diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::NonPositiveDefinite(what));
    }
    Ok(chol)
}

pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Clamp eigenvalues below `eps` up to `eps`. Returns `true` if the matrix was changed.
pub fn repair_psd(cov: &mut DMatrix<f64>, eps: f64) -> bool {
    symmetrize(cov);
    let n = cov.nrows();
    let shifted = &*cov - DMatrix::identity(n, n) * eps;
    if Cholesky::new(shifted).is_some() {
        return false;
    }
    let eig = SymmetricEigen::new(cov.clone());
    let vals = eig.eigenvalues.map(|v| if v < eps || !v.is_finite() { eps } else { v });
    let mut repaired = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut repaired);
    *cov = repaired;
    true
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has length {d} but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let scale = cov.amax().max(1.0);
        for i in 0..d {
            for j in (i + 1)..d {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        let mut cov = cov;
        symmetrize(&mut cov);
        cholesky(&cov, "covariance")?;
        Ok(Self { mean, cov })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E[x xᵀ] = cov + mean meanᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.cov + &self.mean * self.mean.transpose()
    }

    pub fn to_canonical(&self) -> Result<GaussianCanonical> {
        moments_to_canonical(self)
    }

    pub(crate) fn max_abs(&self) -> f64 {
        self.mean.amax().max(self.cov.amax())
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite())
    }
}

impl GaussianCanonical {
    pub fn new(h: DVector<f64>, j: DMatrix<f64>) -> Result<Self> {
        let d = h.len();
        if j.nrows() != d || j.ncols() != d {
            return Err(Error::Dimension(format!(
                "h has length {d} but J is {}x{}",
                j.nrows(),
                j.ncols()
            )));
        }
        let mut j = j;
        symmetrize(&mut j);
        Ok(Self { h, j })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            h: DVector::zeros(d),
            j: DMatrix::zeros(d, d),
        }
    }

    /// Nearly flat base measure `h = 0`, `J = scale·I`.
    pub fn flat(d: usize, scale: f64) -> Self {
        Self {
            h: DVector::zeros(d),
            j: DMatrix::identity(d, d) * scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().chain(self.j.iter()).all(|v| *v == 0.0)
    }

    pub fn to_moments(&self) -> Result<GaussianMoments> {
        canonical_to_moments(self)
    }

    pub fn log_partition(&self) -> Result<f64> {
        log_partition(self)
    }

    pub fn add_site(&self, site: &GaussianCanonical, scale: f64) -> GaussianCanonical {
        add_site(self, site, scale)
    }

    /// `self - other`.
    pub fn sub(&self, other: &GaussianCanonical) -> GaussianCanonical {
        add_site(self, other, -1.0)
    }

    /// `(1 - w)·self + w·other`.
    pub fn blend(&self, other: &GaussianCanonical, w: f64) -> GaussianCanonical {
        let mut j = &self.j * (1.0 - w) + &other.j * w;
        symmetrize(&mut j);
        GaussianCanonical {
            h: &self.h * (1.0 - w) + &other.h * w,
            j,
        }
    }

    /// Largest absolute difference over every entry of `h` and `J`.
    pub fn max_abs_diff(&self, other: &GaussianCanonical) -> f64 {
        let dh = (&self.h - &other.h).amax();
        let dj = (&self.j - &other.j).amax();
        dh.max(dj)
    }

    /// `λ·⟨f⟩ = hᵀmean - ½ tr(J E[xxᵀ])` for the given moments.
    pub fn dot_moments(&self, m: &GaussianMoments) -> f64 {
        let second = m.second_moment();
        self.h.dot(&m.mean) - 0.5 * self.j.component_mul(&second).sum()
    }
}

/// `J = cov⁻¹`, `h = cov⁻¹ mean`.
pub fn moments_to_canonical(m: &GaussianMoments) -> Result<GaussianCanonical> {
    let chol = cholesky(&m.cov, "covariance")?;
    let mut j = chol.inverse();
    symmetrize(&mut j);
    let h = chol.solve(&m.mean);
    Ok(GaussianCanonical { h, j })
}

/// `cov = J⁻¹`, `mean = J⁻¹ h`.
pub fn canonical_to_moments(c: &GaussianCanonical) -> Result<GaussianMoments> {
    let chol = cholesky(&c.j, "precision")?;
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    let mean = chol.solve(&c.h);
    Ok(GaussianMoments { mean, cov })
}

/// `log ∫ exp(hᵀx - ½xᵀJx) dx = ½ hᵀJ⁻¹h - ½ log det J + (d/2) log 2π`.
pub fn log_partition(c: &GaussianCanonical) -> Result<f64> {
    let chol = cholesky(&c.j, "precision")?;
    let sol = chol.solve(&c.h);
    let d = c.dim() as f64;
    Ok(0.5 * c.h.dot(&sol) - 0.5 * log_det(&chol) + 0.5 * d * LN_2PI)
}

/// Componentwise `c + scale·site`.
pub fn add_site(c: &GaussianCanonical, site: &GaussianCanonical, scale: f64) -> GaussianCanonical {
    if scale == 0.0 {
        return c.clone();
    }
    let mut j = &c.j + &site.j * scale;
    symmetrize(&mut j);
    GaussianCanonical {
        h: &c.h + &site.h * scale,
        j,
    }
}
