//! Steps shared by the subcommands: simulate a ground-truth path, observe it,
//! and run one inference method.

use ctep::{
    derive_seed, euler_maruyama, gillespie, run_adf, run_ep, sample_observations, DiffusionTrajectory,
    DiscreteObsModel, EpResult, JumpTrajectory, MarginalPath, Observation, Trajectory,
};
use nalgebra::DVector;

use crate::config::{Experiment, Method, Process};

/// Observation noise draws use this sub-stream of a replicate's seed.
pub const OBSERVATION_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub enum Truth {
    Jump(JumpTrajectory),
    Diffusion(DiffusionTrajectory),
}

impl Truth {
    pub fn trajectory(&self) -> &dyn Trajectory {
        match self {
            Truth::Jump(t) => t,
            Truth::Diffusion(t) => t,
        }
    }
}

/// An SSA path for jump processes, an Euler-Maruyama path on the grid for diffusions.
pub fn simulate_truth(exp: &Experiment, seed: u64) -> ctep::Result<Truth> {
    match &exp.process {
        Process::Jump(m) => {
            let n0: Vec<i64> = exp.start.iter().map(|v| *v as i64).collect();
            gillespie(m, &n0, exp.grid.t0(), exp.grid.t1(), seed).map(Truth::Jump)
        }
        Process::Diffusion(s) => euler_maruyama(s, &exp.start, &exp.grid, seed).map(Truth::Diffusion),
    }
}

pub fn observe(exp: &Experiment, truth: &Truth, model: &DiscreteObsModel, seed: u64) -> ctep::Result<Vec<Observation>> {
    sample_observations(
        truth.trajectory(),
        &exp.obs_times,
        model,
        derive_seed(seed, OBSERVATION_STREAM),
    )
}

pub fn infer(
    exp: &Experiment,
    method: Method,
    obs: &[Observation],
    model: &DiscreteObsModel,
) -> ctep::Result<EpResult> {
    match method {
        Method::Ep => run_ep(&exp.sde, obs, model, &exp.loss, &exp.init, &exp.grid, &exp.ep),
        Method::Adf | Method::AdfS => run_adf(
            &exp.sde,
            obs,
            model,
            &exp.loss,
            &exp.init,
            &exp.grid,
            method == Method::AdfS,
        ),
    }
}

/// Root mean squared error between posterior means and true states, pooled
/// over every (node, component) cell.
pub fn rmse(path: &MarginalPath, nodes: &[usize], truth: &[DVector<f64>]) -> f64 {
    let mut sq = 0.0;
    let mut cells = 0;
    for (k, x) in nodes.iter().zip(truth) {
        sq += (&path.nodes[*k].mean - x).norm_squared();
        cells += x.len();
    }
    if cells == 0 {
        return 0.0;
    }
    (sq / cells as f64).sqrt()
}
