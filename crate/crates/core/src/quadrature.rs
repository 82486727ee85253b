//! Gauss-Hermite rules for `∫ e^{-z²} g(z) dz`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// `n`-point rule. Nodes come from the Jacobi matrix eigenvalues and are
    /// polished by Newton steps on the orthonormal Hermite recurrence, which
    /// also yields weights with full relative accuracy in the tails.
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "quadrature order must be positive");
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut weights = Vec::with_capacity(n);
        for z in nodes.iter_mut() {
            let mut dp = 0.0;
            for _ in 0..10 {
                let (p, d) = orthonormal_hermite(n, *z);
                dp = d;
                let step = p / d;
                *z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            let (_, d) = orthonormal_hermite(n, *z);
            if d.is_finite() {
                dp = d;
            }
            weights.push(2.0 / (dp * dp));
        }
        Self { nodes, weights }
    }

    /// Shared cached rule of order `n`.
    pub fn cached(n: usize) -> Arc<GaussHermite> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard.entry(n).or_insert_with(|| Arc::new(GaussHermite::new(n))).clone()
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Value of the degree-`n` orthonormal Hermite function and its derivative scaled so
/// that the weight is `2 / p'²`.
fn orthonormal_hermite(n: usize, z: f64) -> (f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j - 1) as f64 / j as f64).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}
