//! Process priors: polynomial drift/diffusion SDEs and reaction-network jump
//! processes, plus the chemical Langevin conversion between them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::cholesky;
use crate::polynomial::PolynomialMap;

/// Default Lotka-Volterra rate constants `(k0, k1, k2, k3)`.
pub const LOTKA_VOLTERRA_RATES: [f64; 4] = [5.0, 0.3, 0.004, 0.6];

/// Time-homogeneous SDE `dx = a(x) dt + b(x)^{1/2} dW` with polynomial `a` and `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdeSpec {
    dim: usize,
    drift: Vec<PolynomialMap>,
    diffusion: Vec<Vec<PolynomialMap>>,
    pub params: BTreeMap<String, f64>,
}

impl SdeSpec {
    pub fn new(drift: Vec<PolynomialMap>, diffusion: Vec<Vec<PolynomialMap>>) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if diffusion.len() != dim || diffusion.iter().any(|row| row.len() != dim) {
            return Err(Error::Dimension(format!("diffusion must be {dim}x{dim}")));
        }
        for p in drift.iter().chain(diffusion.iter().flatten()) {
            if p.dim() != dim {
                return Err(Error::Dimension(format!(
                    "polynomial over {} variables in a {dim}-dimensional model",
                    p.dim()
                )));
            }
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if diffusion[i][j] != diffusion[j][i] {
                    return Err(Error::InvalidArgument(format!(
                        "diffusion entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            drift,
            diffusion,
            params: BTreeMap::new(),
        })
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &[PolynomialMap] {
        &self.drift
    }

    pub fn diffusion(&self) -> &[Vec<PolynomialMap>] {
        &self.diffusion
    }

    pub fn drift_at(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.drift.iter().map(|p| p.evaluate(x)))
    }

    pub fn diffusion_at(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| self.diffusion[i][j].evaluate(x))
    }
}

/// Markov jump process over `dim` species with `R` reactions.
///
/// `stoich[i][r]` is the change of species `i` when reaction `r` fires.
#[derive(Clone, Debug, PartialEq)]
pub struct MjpSpec {
    dim: usize,
    stoich: Vec<Vec<i64>>,
    rates: Vec<PolynomialMap>,
    pub params: BTreeMap<String, f64>,
}

impl MjpSpec {
    pub fn new(stoich: Vec<Vec<i64>>, rates: Vec<PolynomialMap>) -> Result<Self> {
        let dim = stoich.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("species count must be positive".into()));
        }
        let r = rates.len();
        if stoich.iter().any(|row| row.len() != r) {
            return Err(Error::Dimension(format!(
                "stoichiometry rows must have one entry per reaction ({r})"
            )));
        }
        if let Some(p) = rates.iter().find(|p| p.dim() != dim) {
            return Err(Error::Dimension(format!(
                "rate polynomial over {} variables for {dim} species",
                p.dim()
            )));
        }
        Ok(Self {
            dim,
            stoich,
            rates,
            params: BTreeMap::new(),
        })
    }

    pub fn with_params(mut self, params: BTreeMap<String, f64>) -> Self {
        self.params = params;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_reactions(&self) -> usize {
        self.rates.len()
    }

    pub fn stoich(&self) -> &[Vec<i64>] {
        &self.stoich
    }

    pub fn rates(&self) -> &[PolynomialMap] {
        &self.rates
    }

    /// State change of reaction `r`.
    pub fn column(&self, r: usize) -> Vec<i64> {
        self.stoich.iter().map(|row| row[r]).collect()
    }

    /// Rate `g_r(x)` of every reaction.
    pub fn propensities(&self, x: &[f64]) -> Vec<f64> {
        self.rates.iter().map(|g| g.evaluate(x)).collect()
    }
}

/// Chemical Langevin approximation: drift `S·g(x)`, diffusion `S·diag(g(x))·Sᵀ`.
pub fn cle_from_mjp(m: &MjpSpec) -> SdeSpec {
    let d = m.dim;
    let drift = (0..d)
        .map(|i| {
            m.rates.iter().enumerate().fold(PolynomialMap::zero(d), |acc, (r, g)| {
                let s = m.stoich[i][r];
                if s == 0 {
                    acc
                } else {
                    &acc + &g.scale(s as f64)
                }
            })
        })
        .collect();
    let mut diffusion = vec![vec![PolynomialMap::zero(d); d]; d];
    for i in 0..d {
        for j in i..d {
            let mut entry = PolynomialMap::zero(d);
            for (r, g) in m.rates.iter().enumerate() {
                let s = m.stoich[i][r] * m.stoich[j][r];
                if s != 0 {
                    entry = &entry + &g.scale(s as f64);
                }
            }
            diffusion[j][i] = entry.clone();
            diffusion[i][j] = entry;
        }
    }
    SdeSpec {
        dim: d,
        drift,
        diffusion,
        params: m.params.clone(),
    }
}

pub fn evaluate_polynomial(p: &PolynomialMap, x: &[f64]) -> f64 {
    p.evaluate(x)
}

/// Prey/predator network `∅→X`, `X→2X`, `X+Y→2Y`, `Y→∅` with default rates.
pub fn builtin_lotka_volterra() -> MjpSpec {
    lotka_volterra(LOTKA_VOLTERRA_RATES)
}

pub fn lotka_volterra(k: [f64; 4]) -> MjpSpec {
    let stoich = vec![vec![1, 1, -1, 0], vec![0, 0, 1, -1]];
    let rates = vec![
        PolynomialMap::monomial(2, k[0], vec![0, 0]),
        PolynomialMap::monomial(2, k[1], vec![1, 0]),
        PolynomialMap::monomial(2, k[2], vec![1, 1]),
        PolynomialMap::monomial(2, k[3], vec![0, 1]),
    ];
    let params = ["k0", "k1", "k2", "k3"]
        .iter()
        .zip(k)
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    MjpSpec::new(stoich, rates)
        .expect("static model is well formed")
        .with_params(params)
}

/// Ornstein-Uhlenbeck process `dx = A x dt + b^{1/2} dW` with SPD `b`.
pub fn builtin_ou(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<SdeSpec> {
    let d = a.nrows();
    if d == 0 || a.ncols() != d || b.nrows() != d || b.ncols() != d {
        return Err(Error::Dimension(format!(
            "OU needs square A and b of equal size, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if (b - b.transpose()).amax() > 1e-12 * b.amax().max(1.0) {
        return Err(Error::InvalidArgument("OU diffusion must be symmetric".into()));
    }
    cholesky(b, "OU diffusion")?;
    let drift = (0..d)
        .map(|i| {
            PolynomialMap::from_terms(
                d,
                (0..d).map(|j| {
                    let mut e = vec![0; d];
                    e[j] = 1;
                    (a[(i, j)], e)
                }),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let diffusion = (0..d)
        .map(|i| (0..d).map(|j| PolynomialMap::constant(d, b[(i, j)])).collect())
        .collect();
    SdeSpec::new(drift, diffusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lv_rates_at_state() {
        let lv = builtin_lotka_volterra();
        let g = lv.propensities(&[100.0, 50.0]);
        let expected = [5.0, 30.0, 20.0, 30.0];
        for (a, b) in g.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn lv_predation_conserves_total() {
        let lv = builtin_lotka_volterra();
        assert_eq!(lv.column(2).iter().sum::<i64>(), 0);
        assert_eq!(lv.stoich(), &[vec![1, 1, -1, 0], vec![0, 0, 1, -1]]);
    }

    #[test]
    fn lv_cle_symbolic_form() {
        let [k0, k1, k2, k3] = LOTKA_VOLTERRA_RATES;
        let sde = cle_from_mjp(&builtin_lotka_volterra());
        let a = sde.drift();
        assert_eq!(a[0].coefficient(&[0, 0]), k0);
        assert_eq!(a[0].coefficient(&[1, 0]), k1);
        assert_eq!(a[0].coefficient(&[1, 1]), -k2);
        assert_eq!(a[0].len(), 3);
        assert_eq!(a[1].coefficient(&[1, 1]), k2);
        assert_eq!(a[1].coefficient(&[0, 1]), -k3);
        assert_eq!(a[1].len(), 2);

        let b = sde.diffusion();
        assert_eq!(b[0][0].coefficient(&[0, 0]), k0);
        assert_eq!(b[0][0].coefficient(&[1, 0]), k1);
        assert_eq!(b[0][0].coefficient(&[1, 1]), k2);
        assert_eq!(b[0][1].coefficient(&[1, 1]), -k2);
        assert_eq!(b[0][1].len(), 1);
        assert_eq!(b[1][0], b[0][1]);
        assert_eq!(b[1][1].coefficient(&[1, 1]), k2);
        assert_eq!(b[1][1].coefficient(&[0, 1]), k3);
    }

    #[test]
    fn single_birth_reaction() {
        let m = MjpSpec::new(vec![vec![1]], vec![PolynomialMap::constant(1, 2.5)]).unwrap();
        let s = cle_from_mjp(&m);
        assert_eq!(s.drift_at(&[7.0])[0], 2.5);
        assert_eq!(s.diffusion_at(&[7.0])[(0, 0)], 2.5);
    }

    #[test]
    fn zero_reactions() {
        let m = MjpSpec::new(vec![vec![], vec![]], vec![]).unwrap();
        let s = cle_from_mjp(&m);
        assert_eq!(s.drift_at(&[1.0, 2.0]), DVector::zeros(2));
        assert_eq!(s.diffusion_at(&[1.0, 2.0]), DMatrix::zeros(2, 2));
    }

    #[test]
    fn ou_drift() {
        let s = builtin_ou(&-DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(s.drift_at(&[2.0])[0], -2.0);
        assert_eq!(s.diffusion_at(&[2.0])[(0, 0)], 1.0);
    }

    #[test]
    fn ou_rejects_bad_input() {
        assert!(builtin_ou(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3)).is_err());
        assert!(builtin_ou(&DMatrix::identity(1, 1), &-DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn asymmetric_diffusion_rejected() {
        let z = PolynomialMap::zero(2);
        let one = PolynomialMap::constant(2, 1.0);
        let err = SdeSpec::new(
            vec![z.clone(), z.clone()],
            vec![vec![one.clone(), one], vec![z.clone(), z]],
        );
        assert!(err.is_err());
    }
}
