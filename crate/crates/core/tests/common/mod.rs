//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Exact discretization of `dx = A x dt + B^{1/2} dW` over `dt` via the
/// Van Loan block exponential: returns `(Φ, Q)` with `x' = Φx + N(0, Q)`.
pub fn ou_transition(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a.nrows();
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(&(-a * dt));
    m.view_mut((0, d), (d, d)).copy_from(&(b * dt));
    m.view_mut((d, d), (d, d)).copy_from(&(a.transpose() * dt));
    let e = m.exp();
    let phi = e.view((d, d), (d, d)).transpose();
    let q = &phi * e.view((0, d), (d, d));
    let q = (&q + q.transpose()) * 0.5;
    (phi, q)
}

pub struct KalmanRts {
    pub filtered: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub smoothed: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub log_likelihood: f64,
}

fn log_gauss(y: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let d = y.len() as f64;
    let inv = s.clone().try_inverse().expect("innovation covariance invertible");
    let r = y - m;
    -0.5 * (r.dot(&(&inv * &r)) + s.determinant().ln() + d * (2.0 * std::f64::consts::PI).ln())
}

/// Discrete-time Kalman filter and RTS smoother at `times`, observing
/// `y = x + N(0, R)` wherever `obs[k]` is present.
pub fn kalman_rts(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    times: &[f64],
    obs: &[Option<DVector<f64>>],
    r: &DMatrix<f64>,
) -> KalmanRts {
    let n = times.len();
    let mut filtered = Vec::with_capacity(n);
    let mut predicted = Vec::with_capacity(n);
    let mut transitions = Vec::with_capacity(n);
    let mut log_likelihood = 0.0;
    let (mut m, mut p) = (m0.clone(), p0.clone());
    for k in 0..n {
        if k > 0 {
            let (phi, q) = ou_transition(a, b, times[k] - times[k - 1]);
            m = &phi * &m;
            p = &phi * &p * phi.transpose() + q;
            transitions.push(phi);
        }
        predicted.push((m.clone(), p.clone()));
        if let Some(y) = &obs[k] {
            let s = &p + r;
            log_likelihood += log_gauss(y, &m, &s);
            let gain = &p * s.try_inverse().unwrap();
            m = &m + &gain * (y - &m);
            p = &p - &gain * &p;
            p = (&p + p.transpose()) * 0.5;
        }
        filtered.push((m.clone(), p.clone()));
    }
    let mut smoothed = filtered.clone();
    for k in (0..n - 1).rev() {
        let (mf, pf) = &filtered[k];
        let (mp, pp) = &predicted[k + 1];
        let g = pf * transitions[k].transpose() * pp.clone().try_inverse().unwrap();
        let (ms_next, ps_next) = smoothed[k + 1].clone();
        let ms = mf + &g * (ms_next - mp);
        let ps = pf + &g * (ps_next - pp) * g.transpose();
        smoothed[k] = (ms, (&ps + ps.transpose()) * 0.5);
    }
    KalmanRts {
        filtered,
        smoothed,
        log_likelihood,
    }
}

/// Composite trapezoid on an `n × n` mesh over a rectangle: returns
/// `[∫p, ∫x p, ∫y p, ∫x² p, ∫y² p, ∫xy p]` for the density `p`.
pub fn trapezoid_2d_moments(lo: [f64; 2], hi: [f64; 2], n: usize, p: impl Fn(f64, f64) -> f64) -> [f64; 6] {
    let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
    let w = |i: usize| if i == 0 || i == n { 0.5 } else { 1.0 };
    let mut acc = [0.0; 6];
    for i in 0..=n {
        let x = lo[0] + i as f64 * h[0];
        for j in 0..=n {
            let y = lo[1] + j as f64 * h[1];
            let f = w(i) * w(j) * p(x, y);
            for (a, v) in acc.iter_mut().zip([1.0, x, y, x * x, y * y, x * y]) {
                *a += v * f;
            }
        }
    }
    acc.map(|a| a * h[0] * h[1])
}

/// `∫ g(x) dx` on `[lo, hi]` by composite Simpson with `n` (even) panels.
pub fn simpson(lo: f64, hi: f64, n: usize, g: impl Fn(f64) -> f64) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (hi - lo) / n as f64;
    let mut acc = g(lo) + g(hi);
    for i in 1..n {
        acc += g(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
