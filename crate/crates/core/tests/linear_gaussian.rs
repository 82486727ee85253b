mod common;

use ctep::{
    builtin_ou, run_adf, run_ep, ContinuousLoss, DiscreteObsModel, EpConfig, GaussianMoments, Observation, SiteInit,
    TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

struct Case {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    r: DMatrix<f64>,
    init: GaussianMoments,
    grid: TimeGrid,
    obs: Vec<Observation>,
}

impl Case {
    fn oracle(&self) -> common::KalmanRts {
        let times = self.grid.times();
        let mut ys = vec![None; times.len()];
        for y in &self.obs {
            ys[self.grid.snap(y.time).unwrap()] = Some(y.value.clone());
        }
        common::kalman_rts(&self.a, &self.b, &self.init.mean, &self.init.cov, &times, &ys, &self.r)
    }
}

fn reference_case() -> Case {
    let grid = TimeGrid::new(0.0, 5.0, 1000).unwrap();
    let obs = [
        (0.8, [1.2, -0.4]),
        (1.7, [0.3, 0.9]),
        (2.5, [-0.8, 0.1]),
        (3.6, [0.5, -1.3]),
        (4.4, [1.6, 0.7]),
    ]
    .iter()
    .map(|(t, v)| Observation::new(*t, DVector::from_row_slice(v)))
    .collect();
    Case {
        a: -DMatrix::identity(2, 2),
        b: DMatrix::identity(2, 2),
        r: DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.5]),
        init: GaussianMoments::new(
            DVector::from_vec(vec![1.0, -0.5]),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.8])),
        )
        .unwrap(),
        grid,
        obs,
    }
}

fn max_err(path: &[GaussianMoments], oracle: &[(DVector<f64>, DMatrix<f64>)]) -> f64 {
    path.iter()
        .zip(oracle)
        .map(|(m, (om, oc))| (&m.mean - om).amax().max((&m.cov - oc).amax()))
        .fold(0.0, f64::max)
}

fn check_case(c: &Case, tol: f64) -> Result<(), String> {
    let spec = builtin_ou(&c.a, &c.b).unwrap();
    let model = DiscreteObsModel::gaussian(c.r.clone()).unwrap();
    let oracle = c.oracle();

    let ep = run_ep(
        &spec,
        &c.obs,
        &model,
        &ContinuousLoss::None,
        &c.init,
        &c.grid,
        &EpConfig::default(),
    )
    .unwrap();
    let adf = run_adf(&spec, &c.obs, &model, &ContinuousLoss::None, &c.init, &c.grid, false).unwrap();
    let adfs = run_adf(&spec, &c.obs, &model, &ContinuousLoss::None, &c.init, &c.grid, true).unwrap();

    let checks = [
        ("ep smoothed", max_err(&ep.smoothed.nodes, &oracle.smoothed)),
        ("adf filtered", max_err(&adf.smoothed.nodes, &oracle.filtered)),
        ("adf-s smoothed", max_err(&adfs.smoothed.nodes, &oracle.smoothed)),
        ("ep evidence", (ep.log_evidence - oracle.log_likelihood).abs()),
        ("adf evidence", (adf.log_evidence - oracle.log_likelihood).abs()),
    ];
    for (what, err) in checks {
        if err.is_nan() || err > tol {
            return Err(format!("{what}: error {err:e}"));
        }
    }
    if !(ep.converged && ep.sweeps_run == 1) {
        return Err(format!(
            "ep took {} sweeps (converged = {})",
            ep.sweeps_run, ep.converged
        ));
    }
    Ok(())
}

#[test]
fn ou_2d_matches_kalman_rts() {
    check_case(&reference_case(), 1e-6).unwrap();
}

#[test]
fn adf_smoother_equals_single_undamped_ep_sweep_from_zero() {
    let c = reference_case();
    let spec = builtin_ou(&c.a, &c.b).unwrap();
    let model = DiscreteObsModel::gaussian(c.r.clone()).unwrap();
    let cfg = EpConfig {
        damping: 1.0,
        max_sweeps: 1,
        init: SiteInit::Zero,
        ..Default::default()
    };
    let ep = run_ep(&spec, &c.obs, &model, &ContinuousLoss::None, &c.init, &c.grid, &cfg).unwrap();
    let adfs = run_adf(&spec, &c.obs, &model, &ContinuousLoss::None, &c.init, &c.grid, true).unwrap();
    for (a, b) in ep.smoothed.nodes.iter().zip(&adfs.smoothed.nodes) {
        assert!((&a.mean - &b.mean).amax() < 1e-9);
        assert!((&a.cov - &b.cov).amax() < 1e-9);
    }
    for ((_, a), (_, b)) in ep.sites.discrete.iter().zip(&adfs.sites.discrete) {
        assert!(a.max_abs_diff(b) < 1e-8);
    }
}

#[test]
fn evidence_tracks_noise_level_in_one_dimension() {
    // prior N(0, 1) at rest (a = 0, b → tiny), one datum far away at t = 1
    let a = DMatrix::from_element(1, 1, -1.0);
    let b = DMatrix::from_element(1, 1, 2.0);
    let init = GaussianMoments::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0)).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let obs = [Observation::new(1.0, DVector::from_vec(vec![6.0]))];
    let spec = builtin_ou(&a, &b).unwrap();
    let evidence = |r: f64| {
        let model = DiscreteObsModel::gaussian(DMatrix::from_element(1, 1, r)).unwrap();
        run_ep(
            &spec,
            &obs,
            &model,
            &ContinuousLoss::None,
            &init,
            &grid,
            &EpConfig::default(),
        )
        .unwrap()
        .log_evidence
    };
    // stationary prior: x_1 ~ N(0, 1), so y ~ N(0, 1 + r)
    let exact = |r: f64| -0.5 * (36.0 / (1.0 + r) + (2.0 * std::f64::consts::PI * (1.0 + r)).ln());
    for r in [0.5, 1.0] {
        assert!((evidence(r) - exact(r)).abs() < 1e-6);
    }
    assert!(evidence(1.0) > evidence(0.5));
}

fn spd(seed: &[f64], shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(2, 2, seed);
    &m * m.transpose() + DMatrix::identity(2, 2) * shift
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn random_linear_gaussian_models_match_oracle(
        s in prop::array::uniform4(-0.8f64..0.8),
        skew in -1.0f64..1.0,
        t in prop::array::uniform4(-0.8f64..0.8),
        u in prop::array::uniform4(-0.5f64..0.5),
        mean0 in prop::array::uniform2(-2.0f64..2.0),
        ys in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 1..5),
    ) {
        let k = DMatrix::from_row_slice(2, 2, &[0.0, skew, -skew, 0.0]);
        let a = -spd(&s, 0.3) + k;
        let b = spd(&t, 0.2);
        let r = spd(&u, 0.1);
        let grid = TimeGrid::new(0.0, 2.0, 400).unwrap();
        let n = ys.len();
        let obs = ys
            .iter()
            .enumerate()
            .map(|(i, v)| Observation::new(2.0 * (i + 1) as f64 / (n + 1) as f64, DVector::from_row_slice(v)))
            .map(|o| Observation::new(grid.time(grid.snap(o.time).unwrap()), o.value))
            .collect();
        let init = GaussianMoments::new(DVector::from_row_slice(&mean0), DMatrix::identity(2, 2) * 0.7).unwrap();
        let case = Case { a, b, r, init, grid, obs };
        prop_assert!(check_case(&case, 1e-6).is_ok(), "{:?}", check_case(&case, 1e-6));
    }
}
