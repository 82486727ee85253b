//! Ground-truth simulation: exact jump-process paths, Euler-Maruyama
//! diffusions, and noisy observations of either.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::filter::{TimeGrid, DIVERGENCE_LIMIT};
use crate::likelihood::{DiscreteObsModel, Observation};
use crate::process::{MjpSpec, SdeSpec};

/// Generator used by every simulation, recorded in experiment outputs.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng/rand_chacha-0.9/seed_from_u64";

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A seed for independent sub-stream `stream` of `seed`, e.g. to keep the
/// observation noise of a replicate separate from its sample path.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = rng_from_seed(seed);
    rng.set_stream(stream.wrapping_add(1));
    rng.next_u64()
}

/// A sample path that can be read at any time inside its horizon.
pub trait Trajectory {
    fn dim(&self) -> usize;
    fn horizon(&self) -> (f64, f64);
    fn state_at(&self, t: f64) -> DVector<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct JumpTrajectory {
    pub t0: f64,
    pub t1: f64,
    /// Jump times, strictly increasing.
    pub times: Vec<f64>,
    /// `states[0]` is the initial state; `states[i + 1]` holds from `times[i]`.
    pub states: Vec<Vec<i64>>,
    pub seed: u64,
}

impl JumpTrajectory {
    pub fn num_jumps(&self) -> usize {
        self.times.len()
    }

    pub fn state_index(&self, t: f64) -> usize {
        self.times.partition_point(|s| *s <= t)
    }
}

impl Trajectory for JumpTrajectory {
    fn dim(&self) -> usize {
        self.states[0].len()
    }

    fn horizon(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    fn state_at(&self, t: f64) -> DVector<f64> {
        let s = &self.states[self.state_index(t)];
        DVector::from_iterator(s.len(), s.iter().map(|v| *v as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub seed: u64,
    /// Steps at which a negative rate or eigenvalue was clamped to zero.
    pub clamps: usize,
}

impl Trajectory for DiffusionTrajectory {
    fn dim(&self) -> usize {
        self.states[0].len()
    }

    fn horizon(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().expect("non-empty path"))
    }

    /// State at the nearest grid node.
    fn state_at(&self, t: f64) -> DVector<f64> {
        let i = self.times.partition_point(|s| *s < t);
        let k = match i {
            0 => 0,
            i if i >= self.times.len() => self.times.len() - 1,
            i if t - self.times[i - 1] <= self.times[i] - t => i - 1,
            i => i,
        };
        self.states[k].clone()
    }
}

/// Exact stochastic simulation (direct method) of `m` on `[t0, t1]`.
pub fn gillespie(m: &MjpSpec, n0: &[i64], t0: f64, t1: f64, seed: u64) -> Result<JumpTrajectory> {
    if n0.len() != m.dim() {
        return Err(Error::Dimension(format!(
            "initial state of length {} for {} species",
            n0.len(),
            m.dim()
        )));
    }
    if n0.iter().any(|v| *v < 0) {
        return Err(Error::InvalidArgument("initial counts must be non-negative".into()));
    }
    if !(t1 >= t0) {
        return Err(Error::InvalidArgument(format!("empty horizon [{t0}, {t1}]")));
    }
    let mut rng = rng_from_seed(seed);
    let columns: Vec<Vec<i64>> = (0..m.num_reactions()).map(|r| m.column(r)).collect();
    let mut state = n0.to_vec();
    let mut x: Vec<f64> = state.iter().map(|v| *v as f64).collect();
    let mut t = t0;
    let mut times = Vec::new();
    let mut states = vec![state.clone()];

    loop {
        let g = m.propensities(&x);
        if let Some((reaction, rate)) = g.iter().copied().enumerate().find(|(_, r)| *r < 0.0 || r.is_nan()) {
            return Err(Error::NegativeRate {
                reaction,
                rate,
                time: t,
                state,
            });
        }
        let total: f64 = g.iter().sum();
        if total <= 0.0 {
            break;
        }
        let wait: f64 = rng.sample::<f64, _>(Exp1) / total;
        t += wait;
        if t > t1 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = g.len() - 1;
        for (r, rate) in g.iter().enumerate() {
            acc += rate;
            if target < acc {
                chosen = r;
                break;
            }
        }
        // skip zero-rate reactions that a rounding edge could select
        while g[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        for (s, c) in state.iter_mut().zip(&columns[chosen]) {
            *s += c;
        }
        for (xi, s) in x.iter_mut().zip(&state) {
            *xi = *s as f64;
        }
        times.push(t);
        states.push(state.clone());
    }
    Ok(JumpTrajectory {
        t0,
        t1,
        times,
        states,
        seed,
    })
}

/// Symmetric square root with negative eigenvalues clamped to zero; flags a clamp.
fn psd_sqrt(b: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(b.clone());
    let mut clamped = false;
    let roots = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            clamped |= v < -1e-12 * b.amax().max(1.0);
            0.0
        } else {
            v.sqrt()
        }
    });
    (
        &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose(),
        clamped,
    )
}

fn check_path(x: &DVector<f64>, step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::DivergedPath { step });
    }
    Ok(())
}

/// `x_{k+1} = x_k + a(x_k) dt + b(x_k)^{1/2} √dt z_k` on the grid nodes.
pub fn euler_maruyama(s: &SdeSpec, x0: &DVector<f64>, grid: &TimeGrid, seed: u64) -> Result<DiffusionTrajectory> {
    if x0.len() != s.dim() {
        return Err(Error::Dimension(format!(
            "initial state of length {} for a {}-dimensional SDE",
            x0.len(),
            s.dim()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let dt = grid.dt();
    let sq = dt.sqrt();
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(grid.n_nodes());
    let mut clamps = 0;
    check_path(&x, 0)?;
    states.push(x.clone());
    for k in 0..grid.n_steps() {
        let a = s.drift_at(x.as_slice());
        let (root, clamped) = psd_sqrt(&s.diffusion_at(x.as_slice()));
        clamps += clamped as usize;
        let z = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        x = &x + a * dt + root * z * sq;
        check_path(&x, k + 1)?;
        states.push(x.clone());
    }
    Ok(DiffusionTrajectory {
        times: grid.times(),
        states,
        seed,
        clamps,
    })
}

/// Euler-Maruyama for the chemical Langevin equation of `m`, one noise source per reaction.
///
/// Negative rate evaluations (states pushed below zero) are clamped to zero in
/// the noise term and counted.
pub fn cle_euler_maruyama(m: &MjpSpec, x0: &DVector<f64>, grid: &TimeGrid, seed: u64) -> Result<DiffusionTrajectory> {
    if x0.len() != m.dim() {
        return Err(Error::Dimension(format!(
            "initial state of length {} for {} species",
            x0.len(),
            m.dim()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let dt = grid.dt();
    let columns: Vec<DVector<f64>> = (0..m.num_reactions())
        .map(|r| DVector::from_iterator(m.dim(), m.column(r).into_iter().map(|v| v as f64)))
        .collect();
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(grid.n_nodes());
    let mut clamps = 0;
    check_path(&x, 0)?;
    states.push(x.clone());
    for k in 0..grid.n_steps() {
        let g = m.propensities(x.as_slice());
        let mut next = x.clone();
        let mut clamped = false;
        for (col, rate) in columns.iter().zip(&g) {
            let z: f64 = rng.sample(StandardNormal);
            clamped |= *rate < 0.0;
            next += col * (rate * dt + (rate.max(0.0) * dt).sqrt() * z);
        }
        clamps += clamped as usize;
        x = next;
        check_path(&x, k + 1)?;
        states.push(x.clone());
    }
    Ok(DiffusionTrajectory {
        times: grid.times(),
        states,
        seed,
        clamps,
    })
}

/// One observation of `traj` per time, drawn from `model`.
pub fn sample_observations<T: Trajectory + ?Sized>(
    traj: &T,
    times: &[f64],
    model: &DiscreteObsModel,
    seed: u64,
) -> Result<Vec<Observation>> {
    model.validate(traj.dim())?;
    let (t0, t1) = traj.horizon();
    let mut rng = rng_from_seed(seed);
    times
        .iter()
        .map(|t| {
            if !(*t >= t0 && *t <= t1) {
                return Err(Error::InvalidArgument(format!(
                    "observation time {t} outside [{t0}, {t1}]"
                )));
            }
            Ok(Observation::new(*t, model.sample(&traj.state_at(*t), &mut rng)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomial::PolynomialMap;
    use crate::process::{builtin_lotka_volterra, builtin_ou};

    #[test]
    fn derived_seeds_differ_across_streams_and_seeds() {
        let a = derive_seed(3, 0);
        assert_eq!(a, derive_seed(3, 0));
        assert_ne!(a, derive_seed(3, 1));
        assert_ne!(a, derive_seed(4, 0));
        assert_ne!(a, 3);
    }

    #[test]
    fn zero_rates_give_constant_path() {
        let m = MjpSpec::new(vec![vec![1, -1]], vec![PolynomialMap::zero(1), PolynomialMap::zero(1)]).unwrap();
        let tr = gillespie(&m, &[7], 0.0, 10.0, 1).unwrap();
        assert_eq!(tr.num_jumps(), 0);
        assert_eq!(tr.state_at(5.0)[0], 7.0);
    }

    #[test]
    fn jumps_follow_stoichiometry() {
        let lv = builtin_lotka_volterra();
        let tr = gillespie(&lv, &[100, 100], 0.0, 5.0, 3).unwrap();
        assert!(tr.num_jumps() > 100);
        assert!(tr.times.windows(2).all(|w| w[0] < w[1]));
        assert!(tr.times.iter().all(|t| *t > 0.0 && *t <= 5.0));
        let cols: Vec<_> = (0..4).map(|r| lv.column(r)).collect();
        for w in tr.states.windows(2) {
            let diff: Vec<i64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
            assert!(cols.contains(&diff));
        }
        assert!(tr.states.iter().flatten().all(|v| *v >= 0));
    }

    #[test]
    fn negative_rate_aborts() {
        let m = MjpSpec::new(vec![vec![1]], vec![PolynomialMap::constant(1, -1.0)]).unwrap();
        let err = gillespie(&m, &[0], 0.0, 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::NegativeRate { reaction: 0, .. }));
    }

    #[test]
    fn same_seed_same_path() {
        let lv = builtin_lotka_volterra();
        let a = gillespie(&lv, &[100, 100], 0.0, 3.0, 42).unwrap();
        let b = gillespie(&lv, &[100, 100], 0.0, 3.0, 42).unwrap();
        let c = gillespie(&lv, &[100, 100], 0.0, 3.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.times, c.times);
    }

    #[test]
    fn zero_sde_is_constant() {
        let z = PolynomialMap::zero(2);
        let s = SdeSpec::new(
            vec![z.clone(), z.clone()],
            vec![vec![z.clone(), z.clone()], vec![z.clone(), z]],
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -3.0]);
        let tr = euler_maruyama(&s, &x0, &grid, 9).unwrap();
        assert!(tr.states.iter().all(|x| *x == x0));
        assert_eq!(tr.clamps, 0);
    }

    #[test]
    fn diverging_path_is_reported() {
        let s = builtin_ou(&DMatrix::from_element(1, 1, 50.0), &DMatrix::identity(1, 1)).unwrap();
        let grid = TimeGrid::new(0.0, 10.0, 100).unwrap();
        let err = euler_maruyama(&s, &DVector::from_vec(vec![1.0]), &grid, 0).unwrap_err();
        assert!(matches!(err, Error::DivergedPath { .. }));
    }

    #[test]
    fn diffusion_lookup_uses_nearest_node() {
        let tr = DiffusionTrajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![
                DVector::from_vec(vec![0.0]),
                DVector::from_vec(vec![1.0]),
                DVector::from_vec(vec![2.0]),
            ],
            seed: 0,
            clamps: 0,
        };
        assert_eq!(tr.state_at(0.4)[0], 0.0);
        assert_eq!(tr.state_at(0.6)[0], 1.0);
        assert_eq!(tr.state_at(5.0)[0], 2.0);
    }

    #[test]
    fn observation_noise_vanishes_in_the_limit() {
        let lv = builtin_lotka_volterra();
        let tr = gillespie(&lv, &[100, 100], 0.0, 3.0, 5).unwrap();
        let model = DiscreteObsModel::log_normal(1e-8).unwrap();
        let times = [0.5, 1.0, 2.5];
        let obs = sample_observations(&tr, &times, &model, 11).unwrap();
        for y in &obs {
            let x = tr.state_at(y.time);
            assert!(((&y.value - &x).component_div(&x)).amax() < 1e-3);
        }
        assert!(sample_observations(&tr, &[4.0], &model, 11).is_err());
    }
}
