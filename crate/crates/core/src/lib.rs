//! Continuous-time expectation propagation for diffusion processes and
//! reaction networks approximated by the chemical Langevin equation.
//!
//! The pieces, bottom up: Gaussian exponential-family algebra, polynomial
//! process models, Gaussian moment closure, a grid-based filter/smoother,
//! observation likelihoods and continuous losses, the EP/ADF drivers, and
//! simulators for generating ground truth.

// `!(x > 0.0)` is used on purpose to reject NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod closure;
pub mod ep;
pub mod error;
pub mod filter;
pub mod gaussian;
pub mod likelihood;
pub mod polynomial;
pub mod process;
pub mod quadrature;
pub mod ssa;

pub use closure::{forward_rhs, gaussian_expectation, smoothing_rhs, MomentClosure, MomentDerivative};
pub use ep::{
    free_energy, run_adf, run_adf_problem, run_ep, run_ep_problem, EpConfig, EpResult, InferenceProblem, SiteInit,
};
pub use error::{Error, Result};
pub use filter::{
    backward_pass, forward_pass, forward_pass_with, ForwardPassResult, MarginalPath, PathKind, SiteSet, TimeGrid,
};
pub use gaussian::{
    add_site, canonical_to_moments, log_partition, moments_to_canonical, repair_psd, GaussianCanonical,
    GaussianMoments, EPS_PSD,
};
pub use likelihood::{
    continuous_site_update, expected_loss, log_normal_density, tilted_moments, tilted_moments_with_order,
    ContinuousLoss, DiscreteObsModel, LogNormalParam, Observation, QuarticTerm, TiltedMoments,
};
pub use polynomial::PolynomialMap;
pub use process::{
    builtin_lotka_volterra, builtin_ou, cle_from_mjp, evaluate_polynomial, lotka_volterra, MjpSpec, SdeSpec,
};
pub use ssa::{
    cle_euler_maruyama, derive_seed, euler_maruyama, gillespie, sample_observations, DiffusionTrajectory,
    JumpTrajectory, Trajectory, RNG_ALGORITHM,
};
