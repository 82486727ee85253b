//! Sparse multivariate polynomials in the state vector.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// `Σ coeff · Π x_i^{e_i}` with one entry per distinct exponent vector.
///
/// Terms are kept in a map keyed by exponent vector, so construction merges
/// duplicates and drops exact zeros.
#[derive(Clone, PartialEq)]
pub struct PolynomialMap {
    dim: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl PolynomialMap {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::monomial(dim, c, vec![0; dim])
    }

    /// `x_i`.
    pub fn variable(dim: usize, i: usize) -> Self {
        let mut e = vec![0; dim];
        e[i] = 1;
        Self::monomial(dim, 1.0, e)
    }

    /// Panics if `exponents.len() != dim`; use [`PolynomialMap::from_terms`] for untrusted input.
    pub fn monomial(dim: usize, coeff: f64, exponents: Vec<u32>) -> Self {
        assert_eq!(exponents.len(), dim, "exponent vector length");
        let mut p = Self::zero(dim);
        p.push(coeff, exponents);
        p
    }

    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, Vec<u32>)>,
    {
        let mut p = Self::zero(dim);
        for (c, e) in terms {
            if e.len() != dim {
                return Err(Error::Dimension(format!(
                    "exponent vector {e:?} has length {}, expected {dim}",
                    e.len()
                )));
            }
            if !c.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite coefficient {c}")));
            }
            p.push(c, e);
        }
        Ok(p)
    }

    fn push(&mut self, c: f64, e: Vec<u32>) {
        if c == 0.0 {
            return;
        }
        match self.terms.entry(e) {
            Entry::Occupied(mut o) => {
                *o.get_mut() += c;
                if *o.get() == 0.0 {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                v.insert(c);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (f64, &[u32])> + '_ {
        self.terms.iter().map(|(e, c)| (*c, e.as_slice()))
    }

    /// Total degree; zero for the zero polynomial.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    pub fn coefficient(&self, exponents: &[u32]) -> f64 {
        self.terms.get(exponents).copied().unwrap_or(0.0)
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.terms
            .iter()
            .map(|(e, c)| e.iter().zip(x).fold(*c, |acc, (k, xi)| acc * xi.powi(*k as i32)))
            .sum()
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::zero(self.dim);
        for (e, c) in &self.terms {
            out.push(c * s, e.clone());
        }
        out
    }

    /// `∂p/∂x_i`.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = Self::zero(self.dim);
        for (e, c) in &self.terms {
            if e[i] > 0 {
                let mut d = e.clone();
                d[i] -= 1;
                out.push(c * e[i] as f64, d);
            }
        }
        out
    }
}

impl fmt::Debug for PolynomialMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let mut first = true;
        for (e, c) in &self.terms {
            if !first {
                write!(f, " + ")?;
            }
            first = false;
            write!(f, "{c}")?;
            for (i, k) in e.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "·x{}", i + 1)?,
                    k => write!(f, "·x{}^{k}", i + 1)?,
                }
            }
        }
        Ok(())
    }
}

impl Add for &PolynomialMap {
    type Output = PolynomialMap;
    fn add(self, rhs: &PolynomialMap) -> PolynomialMap {
        assert_eq!(self.dim, rhs.dim);
        let mut out = self.clone();
        for (e, c) in &rhs.terms {
            out.push(*c, e.clone());
        }
        out
    }
}

impl Sub for &PolynomialMap {
    type Output = PolynomialMap;
    fn sub(self, rhs: &PolynomialMap) -> PolynomialMap {
        self + &rhs.scale(-1.0)
    }
}

impl Neg for &PolynomialMap {
    type Output = PolynomialMap;
    fn neg(self) -> PolynomialMap {
        self.scale(-1.0)
    }
}

impl Mul for &PolynomialMap {
    type Output = PolynomialMap;
    fn mul(self, rhs: &PolynomialMap) -> PolynomialMap {
        assert_eq!(self.dim, rhs.dim);
        let mut out = PolynomialMap::zero(self.dim);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &rhs.terms {
                let e = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.push(ca * cb, e);
            }
        }
        out
    }
}
