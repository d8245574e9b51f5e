//! Bayesian broken-stick growth model with a Dirichlet-process mixture on
//! segment velocities and child-specific random knots.
//!
//! The crate fits the model by slice-sampling MCMC, summarizes allocation
//! draws into a consensus clustering and generates synthetic paired cohorts.

pub mod cluster;
pub mod dp;
pub mod error;
pub mod geweke;
pub mod io;
pub mod knots;
mod linalg;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod simgen;
pub mod slice;

pub use cluster::{ari, maximize_pear, psm_from_draws, PearResult, Psm};
pub use dp::{GammaPrior, MixtureState, NiwParams};
pub use error::{Error, Result};
pub use knots::KnotVector;
pub use linalg::MvnDensity;
pub use model::{basis_row, child_loglik, trajectory_eval, ChildRecord, ChildRegression, Cohort, GlobalParams};
pub use sampler::{run_chain, ChainConfig, ChainOutput, Draw, InitStrategy, KnotMode, Priors, Sampler};
pub use simgen::{generate_paired_cohorts, PairedCohorts, SimSpec};
