#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::Command;

use ctep::{GaussianMoments, JumpTrajectory, MarginalPath, Observation, PathKind, TimeGrid};
use ctep_cli::config::Overrides;
use ctep_cli::io::{
    read_marginals, read_observations, read_trajectory, write_jump_trajectory, write_marginals, write_observations,
};
use ctep_cli::{benchmark_cmd, infer_cmd, parse_config, simulate, Experiment};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn experiment(text: &str, out: &Path) -> Experiment {
    parse_config(text)
        .unwrap()
        .resolve(&Overrides {
            out: Some(out.to_path_buf()),
            ..Default::default()
        })
        .unwrap()
}

fn ctep(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ctep")).args(args).output().unwrap()
}

const OU_CONFIG: &str = r#"
horizon = [0.0, 5.0]
n_steps = 1000
start = [1.0, -0.5]

[model]
kind = "ou"
a = [[-1.0, 0.0], [0.0, -1.0]]
b = [[1.0, 0.0], [0.0, 1.0]]

[initial]
mean = [1.0, -0.5]
cov = [[0.5, 0.0], [0.0, 0.8]]

[observations]
times = [0.8, 1.7, 2.5, 3.6, 4.4]

[observations.noise]
kind = "gaussian"
r = [[0.3, 0.1], [0.1, 0.5]]
"#;

#[test]
fn simulate_writes_headed_csvs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let outs_a = simulate(&experiment("seeds = [4]", &a)).unwrap();
    simulate(&experiment("seeds = [4]", &b)).unwrap();
    let traj = std::fs::read_to_string(&outs_a[0].trajectory).unwrap();
    let obs = std::fs::read_to_string(&outs_a[0].observations).unwrap();
    assert!(traj.starts_with("t,n1,n2\n"));
    assert!(obs.starts_with("t,y1,y2\n"));
    assert_eq!(obs.lines().count(), 21);
    for f in ["trajectory.csv", "observations.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_observations_give_a_header_only_file() {
    let dir = tempfile::tempdir().unwrap();
    let outs = simulate(&experiment("[observations]\ncount = 0", dir.path())).unwrap();
    assert_eq!(std::fs::read_to_string(&outs[0].observations).unwrap(), "t,y1,y2\n");
}

#[test]
fn multiple_seeds_get_separate_files() {
    let dir = tempfile::tempdir().unwrap();
    let outs = simulate(&experiment("seeds = [1, 2]\nhorizon = [0.0, 3.0]", dir.path())).unwrap();
    assert_eq!(outs.len(), 2);
    assert!(outs[1].trajectory.ends_with("trajectory-2.csv"));
    assert_ne!(
        std::fs::read(&outs[0].trajectory).unwrap(),
        std::fs::read(&outs[1].trajectory).unwrap()
    );
}

#[test]
fn linear_gaussian_inference_matches_kalman_oracle_file() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(OU_CONFIG, dir.path());
    let data = dir.path().join("obs.csv");
    let ys = [[1.2, -0.4], [0.3, 0.9], [-0.8, 0.1], [0.5, -1.3], [1.6, 0.7]];
    let obs: Vec<Observation> = exp
        .obs_times
        .iter()
        .zip(ys)
        .map(|(t, y)| Observation::new(*t, DVector::from_row_slice(&y)))
        .collect();
    write_observations(&data, 2, &obs).unwrap();

    // oracle file written from the independent discrete-time smoother
    let times = exp.grid.times();
    let mut slots = vec![None; times.len()];
    for o in &obs {
        slots[exp.grid.snap(o.time).unwrap()] = Some(o.value.clone());
    }
    let r = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.5]);
    let a = -DMatrix::identity(2, 2);
    let b = DMatrix::identity(2, 2);
    let rts = common::kalman_rts(&a, &b, &exp.init.mean, &exp.init.cov, &times, &slots, &r);
    let oracle_path = MarginalPath {
        kind: PathKind::Smoothed,
        nodes: rts
            .smoothed
            .iter()
            .map(|(m, p)| GaussianMoments::new(m.clone(), p.clone()).unwrap())
            .collect(),
    };
    let oracle_file = dir.path().join("oracle.csv");
    write_marginals(&oracle_file, &exp.grid, &oracle_path).unwrap();

    let out = infer_cmd(&exp, &data, true).unwrap();
    let got = read_marginals(&out.marginals).unwrap();
    let want = read_marginals(&oracle_file).unwrap();
    assert_eq!(got.times, want.times);
    let worst = got
        .means
        .iter()
        .zip(&want.means)
        .map(|(a, b)| (a - b).amax())
        .chain(got.covs.iter().zip(&want.covs).map(|(a, b)| (a - b).amax()))
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "max cell error {worst:e}");
    assert!(out.report.converged);
    assert_eq!(out.report.sweeps, 1);
}

#[test]
fn ep_and_adf_s_write_separate_schema_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(
        "horizon = [0.0, 6.0]\nn_steps = 400\n[observations]\ncount = 4",
        dir.path(),
    );
    let data = simulate(&exp).unwrap()[0].observations.clone();
    let ep = infer_cmd(&exp, &data, false).unwrap();
    let adfs_exp = experiment(
        "horizon = [0.0, 6.0]\nn_steps = 400\n[observations]\ncount = 4\n[inference]\nmethod = \"adf-s\"",
        dir.path(),
    );
    let adfs = infer_cmd(&adfs_exp, &data, false).unwrap();
    assert_ne!(ep.marginals, adfs.marginals);
    for p in [&ep.marginals, &adfs.marginals] {
        let t = read_marginals(p).unwrap();
        assert_eq!(t.times.len(), 401);
    }
    assert!(ep.report.sweeps >= 1);
    assert_eq!(adfs.report.method, "adf-s");
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ep.diagnostics).unwrap()).unwrap();
    for key in [
        "converged",
        "sweeps",
        "log_evidence",
        "psd_repairs",
        "max_site_delta_history",
    ] {
        assert!(diag.get(key).is_some(), "{key}");
    }
    let flagged = diag["non_paper_defaults"].as_array().unwrap();
    assert!(flagged
        .iter()
        .any(|d| d["field"] == "initial" && d["non_paper_default"] == true));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();

    let out = ctep(&["infer", "--out", d, "--data", &format!("{d}/missing.csv")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data file not found"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "horizon = [0.0, 1.0]\nsurprise = true\n").unwrap();
    let out = ctep(&["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));

    let out = ctep(&["validate"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("implicit default: horizon"));

    // an explosive linear drift overflows the moment equations
    let boom = dir.path().join("boom.toml");
    std::fs::write(
        &boom,
        "horizon = [0.0, 10.0]\nn_steps = 100\nstart = [0.0]\n[model]\nkind = \"ou\"\na = [[5.0]]\nb = [[1.0]]\n\
         [initial]\nmean = [1.0]\ncov = [[1.0]]\n[observations]\ntimes = [5.0]\n\
         [observations.noise]\nkind = \"gaussian\"\nr = [[1.0]]\n",
    )
    .unwrap();
    let data = dir.path().join("y.csv");
    std::fs::write(&data, "t,y1\n5.0,1.0\n").unwrap();
    let out = ctep(&[
        "infer",
        "--config",
        boom.to_str().unwrap(),
        "--out",
        d,
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let stiff = dir.path().join("stiff.toml");
    std::fs::write(
        &stiff,
        "horizon = [0.0, 6.0]\nn_steps = 400\n[observations]\ncount = 4\n[ep]\nmax_sweeps = 1\n",
    )
    .unwrap();
    let cfg = stiff.to_str().unwrap();
    assert_eq!(ctep(&["simulate", "--config", cfg, "--out", d]).status.code(), Some(0));
    let out = ctep(&["infer", "--config", cfg, "--out", d, "--require-convergence"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("diagnostics-ep.json").exists());
    assert_eq!(ctep(&["infer", "--config", cfg, "--out", d]).status.code(), Some(0));
}

const SMALL_BENCHMARK: &str =
    "horizon = [0.0, 9.0]\nn_steps = 600\n[observations]\ncount = 6\n[benchmark]\nreplicates = 4\n";

#[test]
fn benchmark_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL_BENCHMARK}variances = [500.0, 1000.0]\n");
    let mut one = experiment(&text, &dir.path().join("one"));
    one.workers = 1;
    let mut three = experiment(&text, &dir.path().join("three"));
    three.workers = 3;
    let a = benchmark_cmd(&one, false).unwrap();
    let b = benchmark_cmd(&three, false).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(std::fs::read(&a.json).unwrap(), std::fs::read(&b.json).unwrap());
    assert_eq!(std::fs::read(&a.csv).unwrap(), std::fs::read(&b.csv).unwrap());
    assert_eq!(a.report.rows.len(), 4);
    for r in &a.report.rows {
        assert_eq!(r.replicates + r.failures, 4);
        assert!(r.rmse_path >= 0.0 && r.rmse_observations >= 0.0);
    }
    let reread = ctep_cli::benchmark::read_report(&a.json).unwrap();
    assert_eq!(reread, a.report);
}

#[test]
fn nearly_noiseless_data_are_fit_best_at_observation_times() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&format!("{SMALL_BENCHMARK}variances = [1.0]\n"), dir.path());
    let report = benchmark_cmd(&exp, false).unwrap().report;
    for m in [ctep_cli::Method::Ep, ctep_cli::Method::AdfS] {
        let r = report.row(1.0, m).unwrap();
        assert_eq!(r.failures, 0);
        assert!(r.rmse_observations < r.rmse_path, "{r:?}");
    }
}

fn arb_path(d: usize, n: usize) -> impl Strategy<Value = MarginalPath> {
    prop::collection::vec(
        (
            prop::collection::vec(-1e6f64..1e6, d),
            prop::collection::vec(-3.0f64..3.0, d * d),
        ),
        n,
    )
    .prop_map(move |nodes| MarginalPath {
        kind: PathKind::Smoothed,
        nodes: nodes
            .into_iter()
            .map(|(m, c)| {
                let c = DMatrix::from_row_slice(d, d, &c);
                GaussianMoments::new(DVector::from_vec(m), &c * c.transpose() + DMatrix::identity(d, d)).unwrap()
            })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn marginal_csv_round_trips(p in (1usize..4).prop_flat_map(|d| arb_path(d, 6)), t1 in 0.5f64..100.0) {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("m.csv");
        let grid = TimeGrid::new(0.0, t1, 5).unwrap();
        write_marginals(&f, &grid, &p).unwrap();
        let back = read_marginals(&f).unwrap();
        prop_assert_eq!(back, ctep_cli::io::MarginalTable::from_path(&grid, &p));
    }

    #[test]
    fn observation_csv_round_trips(ys in prop::collection::vec((0.0f64..50.0, prop::collection::vec(-1e9f64..1e9, 2)), 0..8)) {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("y.csv");
        let obs: Vec<Observation> = ys.into_iter().map(|(t, v)| Observation::new(t, DVector::from_vec(v))).collect();
        write_observations(&f, 2, &obs).unwrap();
        if obs.is_empty() {
            prop_assert_eq!(std::fs::read_to_string(&f).unwrap(), "t,y1,y2\n");
        } else {
            prop_assert_eq!(read_observations(&f).unwrap(), obs);
        }
    }

    #[test]
    fn trajectory_csv_round_trips(seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("n.csv");
        let tr: JumpTrajectory = ctep::gillespie(&ctep::builtin_lotka_volterra(), &[30, 20], 0.0, 1.0, seed).unwrap();
        write_jump_trajectory(&f, &tr).unwrap();
        let (times, states) = read_trajectory(&f).unwrap();
        prop_assert_eq!(times[0], 0.0);
        prop_assert_eq!(&times[1..], &tr.times[..]);
        for (s, want) in states.iter().zip(&tr.states) {
            prop_assert!(s.iter().zip(want).all(|(a, b)| *a == *b as f64));
        }
    }
}
