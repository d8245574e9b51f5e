//! Joint-distribution ("getting it right") test of the sampler.
//!
//! Marginal statistics of parameters are compared between independent
//! prior-forward draws of `(parameters, data)` and successive-conditional
//! chains that alternate one sampler sweep with regeneration of the data
//! from the current parameters. A correct sampler makes both match.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Cauchy, Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;

use crate::dp::{crp_prior_simulate, resample_weights, Component, GammaPrior, MixtureState, NiwParams};
use crate::error::{Error, Result};
use crate::knots::{knot_prior_sample, KnotVector};
use crate::linalg::MvnDensity;
use crate::model::{fill_basis_row, ChildRecord, ChildRegression, Cohort, GlobalParams};
use crate::rng::{Stage, Streams};
use crate::sampler::{ChainConfig, KnotMode, Priors, Sampler};

/// Size of the synthetic problem used by the harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GewekeShape {
    pub n_children: usize,
    pub n_obs: usize,
    pub n_knots: usize,
    pub horizon: f64,
}

impl Default for GewekeShape {
    fn default() -> Self {
        Self {
            n_children: 10,
            n_obs: 5,
            n_knots: 2,
            horizon: 1.0,
        }
    }
}

/// Moderately informative priors under which both simulators mix quickly.
pub fn harness_priors(dim: usize) -> Priors {
    Priors {
        mu_alpha_mean: 0.0,
        mu_alpha_var: 1.0,
        sigma_alpha_scale: 1.0,
        sigma_eps_scale: 1.0,
        lambda: GammaPrior {
            shape: 2.0,
            rate: 2.0,
        },
        niw: Some(
            NiwParams::new(vec![0.0; dim], 0.5, dim as f64 + 4.0, DMatrix::identity(dim, dim))
                .expect("identity scale is SPD"),
        ),
    }
}

pub const STATISTIC_NAMES: [&str; 20] = [
    "mu_alpha",
    "mu_alpha^2",
    "log_sigma2_alpha",
    "log_sigma2_alpha^2",
    "log_sigma2_eps",
    "log_sigma2_eps^2",
    "lambda",
    "lambda^2",
    "n_clusters",
    "n_clusters^2",
    "alpha_0",
    "beta_0_0",
    "beta_0_1",
    "beta_1_last",
    "knot_0_0",
    "knot_1_last",
    "same_cluster_0_1",
    "mean_alpha",
    "component_mean_of_child_0",
    "score_0_0",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GewekeReport {
    pub names: Vec<String>,
    pub forward_means: Vec<f64>,
    pub chain_means: Vec<f64>,
    pub z: Vec<f64>,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }

    pub fn z_of(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.z[i])
    }
}

struct JointDraw {
    regressions: Vec<ChildRegression>,
    mixture: MixtureState,
    globals: GlobalParams,
    scores: Vec<Vec<f64>>,
}

fn half_cauchy<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    Ok(Cauchy::new(0.0, scale)
        .map_err(|e| Error::Numerical(format!("Cauchy({scale}): {e}")))?
        .sample(rng)
        .abs())
}

fn simulate_scores<R: Rng + ?Sized>(
    times: &[Vec<f64>],
    regressions: &[ChildRegression],
    sigma2_eps: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let sd = sigma2_eps.sqrt();
    times
        .iter()
        .zip(regressions)
        .map(|(ts, reg)| {
            let mut row = vec![0.0; reg.beta.len()];
            ts.iter()
                .map(|&t| {
                    fill_basis_row(t, &reg.knots, &mut row);
                    let mean = reg.alpha + crate::model::dot(&reg.beta, &row);
                    mean + sd * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect()
}

fn prior_forward<R: Rng + ?Sized>(
    priors: &Priors,
    niw: &NiwParams,
    config: &ChainConfig,
    shape: &GewekeShape,
    times: &[Vec<f64>],
    rng: &mut R,
) -> Result<JointDraw> {
    let n = shape.n_children;
    let lambda: f64 = Gamma::new(priors.lambda.shape, 1.0 / priors.lambda.rate)
        .map_err(|e| Error::Numerical(e.to_string()))?
        .sample(rng);
    let allocations = crp_prior_simulate(lambda, n, rng);
    let g = allocations.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; g];
    for &s in &allocations {
        counts[s] += 1;
    }
    let params = (0..g).map(|_| niw.sample(rng)).collect::<Result<Vec<_>>>()?;
    let (weights, remainder) = resample_weights(&counts, lambda, rng)?;
    let components = params
        .iter()
        .zip(&weights)
        .map(|((mu, sigma), &w)| Component::new(mu.clone(), sigma.clone(), w))
        .collect::<Result<Vec<_>>>()?;

    let mu_alpha = Normal::new(priors.mu_alpha_mean, priors.mu_alpha_var.sqrt())
        .map_err(|e| Error::Numerical(e.to_string()))?
        .sample(rng);
    let sigma2_alpha = half_cauchy(priors.sigma_alpha_scale, rng)?.powi(2).max(f64::MIN_POSITIVE);
    let sigma2_eps = half_cauchy(priors.sigma_eps_scale, rng)?.powi(2).max(f64::MIN_POSITIVE);

    let mut regressions = Vec::with_capacity(n);
    for &s in &allocations {
        let alpha = mu_alpha + sigma2_alpha.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let beta = MvnDensity::new(&params[s].0, &params[s].1)?.sample(rng);
        let knots = match config.knot_mode {
            KnotMode::Random => knot_prior_sample(shape.n_knots, shape.horizon, rng)?,
            KnotMode::Fixed => KnotVector::equally_spaced(shape.n_knots, shape.horizon)?,
        };
        regressions.push(ChildRegression::new(alpha, beta, knots)?);
    }
    let scores = simulate_scores(times, &regressions, sigma2_eps, rng);
    Ok(JointDraw {
        mixture: MixtureState::new(components, remainder, lambda, allocations)?,
        regressions,
        globals: GlobalParams::new(mu_alpha, sigma2_alpha, sigma2_eps)?,
        scores,
    })
}

fn statistics(
    regressions: &[ChildRegression],
    mixture: &MixtureState,
    globals: &GlobalParams,
    scores: &[Vec<f64>],
) -> [f64; 20] {
    let n = regressions.len();
    let last = regressions[0].beta.len() - 1;
    let last_knot = regressions[0].knots.len() - 1;
    let s = mixture.allocations();
    let la = globals.sigma2_alpha.ln();
    let le = globals.sigma2_eps.ln();
    let lambda = mixture.lambda();
    let g = mixture.n_occupied() as f64;
    let same = if s[0] == s[1] { 1.0 } else { 0.0 };
    [
        globals.mu_alpha,
        globals.mu_alpha.powi(2),
        la,
        la * la,
        le,
        le * le,
        lambda,
        lambda * lambda,
        g,
        g * g,
        regressions[0].alpha,
        regressions[0].beta[0],
        regressions[0].beta[1.min(last)],
        regressions[1].beta[last],
        regressions[0].knots.xi()[0],
        regressions[1].knots.xi()[last_knot],
        same,
        regressions.iter().map(|r| r.alpha).sum::<f64>() / n as f64,
        mixture.components()[s[0]].mu()[0],
        scores[0][0],
    ]
}

/// Transition budget of the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GewekeRun {
    /// Prior-forward draws, and total successive-conditional transitions.
    pub transitions: usize,
    /// Independent successive-conditional chains sharing the transitions.
    pub chains: usize,
}

impl Default for GewekeRun {
    fn default() -> Self {
        Self {
            transitions: 10_000,
            chains: 1_000,
        }
    }
}

/// Compares `run.transitions` prior-forward draws with the same number of
/// successive-conditional transitions and returns one z-score per statistic.
///
/// Each successive-conditional chain starts from its own prior-forward draw,
/// so every visited state has the joint distribution exactly when the kernel
/// is correct, however slowly the chain mixes. The chain-side standard error
/// comes from the spread of the independent chain averages.
pub fn geweke_joint_check(
    config: &ChainConfig,
    shape: &GewekeShape,
    run: GewekeRun,
    seed: u64,
) -> Result<GewekeReport> {
    if run.chains < 2 || run.transitions < run.chains || run.transitions % run.chains != 0 {
        return Err(Error::config(format!(
            "{} transitions cannot be split evenly across {} chains (at least two)",
            run.transitions, run.chains
        )));
    }
    if shape.n_children < 2 || shape.n_obs == 0 || shape.n_knots == 0 {
        return Err(Error::config("harness needs at least two children, one observation and one knot"));
    }
    let dim = shape.n_knots + 1;
    config.priors.validate(dim)?;
    let priors = &config.priors;
    let niw = priors.niw.clone().unwrap_or_else(|| NiwParams::weakly_informative(dim));
    let streams = Streams::new(seed);

    let mut rng = streams.stream(Stage::Geweke, 0, 0);
    let mut times: Vec<Vec<f64>> = (0..shape.n_children)
        .map(|_| (0..shape.n_obs).map(|_| shape.horizon * rng.random::<f64>()).collect())
        .collect();
    times.iter_mut().for_each(|t| t.sort_by(f64::total_cmp));

    let forward = (0..run.transitions)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.stream(Stage::Prior, r as u64, 0);
            let draw = prior_forward(priors, &niw, config, shape, &times, &mut rng)?;
            Ok(statistics(&draw.regressions, &draw.mixture, &draw.globals, &draw.scores))
        })
        .collect::<Result<Vec<_>>>()?;

    let length = run.transitions / run.chains;
    let chain_means = (0..run.chains)
        .into_par_iter()
        .map(|c| successive_conditional_mean(config, shape, &niw, &times, &streams, c, length))
        .collect::<Result<Vec<_>>>()?;

    let mut report = GewekeReport {
        names: STATISTIC_NAMES.iter().map(|s| s.to_string()).collect(),
        forward_means: Vec::with_capacity(20),
        chain_means: Vec::with_capacity(20),
        z: Vec::with_capacity(20),
    };
    for j in 0..STATISTIC_NAMES.len() {
        let f: Vec<f64> = forward.iter().map(|x| x[j]).collect();
        let c: Vec<f64> = chain_means.iter().map(|x| x[j]).collect();
        let (fm, fv) = mean_var(&f);
        let (cm, cv) = mean_var(&c);
        let se2 = fv / f.len() as f64 + cv / c.len() as f64;
        let resolution = 1e-12 * (1.0 + fm.abs());
        let z = if se2.sqrt() > resolution {
            (fm - cm) / se2.sqrt()
        } else if (fm - cm).abs() <= resolution {
            // a statistic that is constant on both sides
            0.0
        } else {
            (fm - cm).signum() * f64::INFINITY
        };
        report.forward_means.push(fm);
        report.chain_means.push(cm);
        report.z.push(z);
    }
    Ok(report)
}

/// Runs one successive-conditional chain of `length` transitions from a fresh
/// prior-forward draw and returns the per-statistic averages.
fn successive_conditional_mean(
    config: &ChainConfig,
    shape: &GewekeShape,
    niw: &NiwParams,
    times: &[Vec<f64>],
    streams: &Streams,
    chain: usize,
    length: usize,
) -> Result<Vec<f64>> {
    let mut rng = streams.stream(Stage::Geweke, 1, chain as u64);
    let start = prior_forward(&config.priors, niw, config, shape, times, &mut rng)?;
    let children = times
        .iter()
        .zip(&start.scores)
        .enumerate()
        .map(|(i, (t, z))| ChildRecord::new(format!("g{i}"), t.clone(), z.clone(), shape.horizon))
        .collect::<Result<Vec<_>>>()?;
    let cohort = Cohort::new(children, shape.horizon, shape.n_knots)?;
    let mut chain_config = config.clone();
    chain_config.iterations = length as u64;
    chain_config.burnin = 0;
    chain_config.thin = 1;
    chain_config.seed = rng.random();
    let mut sampler = Sampler::from_parts(cohort, chain_config, start.regressions, start.mixture, start.globals)?;

    let mut sums = vec![0.0; STATISTIC_NAMES.len()];
    for t in 0..length {
        sampler.sweep()?;
        let state = sampler.state();
        let regressions: Vec<ChildRegression> = state.children.iter().map(|c| c.regression().clone()).collect();
        let mut rng = streams.stream(Stage::GewekeData, t as u64, chain as u64);
        let scores = simulate_scores(times, &regressions, state.globals.sigma2_eps, &mut rng);
        for (acc, v) in sums.iter_mut().zip(statistics(&regressions, &state.mixture, &state.globals, &scores)) {
            *acc += v;
        }
        sampler.replace_scores(scores)?;
    }
    Ok(sums.into_iter().map(|s| s / length as f64).collect())
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uneven_budget_is_an_error() {
        let mut config = ChainConfig::desk_schedule(1, KnotMode::Random);
        config.priors = harness_priors(3);
        let shape = GewekeShape::default();
        for (transitions, chains) in [(0, 10), (100, 1), (101, 10), (5, 10)] {
            assert!(geweke_joint_check(&config, &shape, GewekeRun { transitions, chains }, 1).is_err());
        }
    }

    #[test]
    fn small_run_is_reproducible() {
        let mut config = ChainConfig::desk_schedule(1, KnotMode::Random);
        config.priors = harness_priors(3);
        let run = GewekeRun {
            transitions: 200,
            chains: 10,
        };
        let a = geweke_joint_check(&config, &GewekeShape::default(), run, 3).unwrap();
        let b = geweke_joint_check(&config, &GewekeShape::default(), run, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.z.len(), STATISTIC_NAMES.len());
    }

    #[test]
    fn knot_prior_sample_respects_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let kv = knot_prior_sample(3, 2.0, &mut rng).unwrap();
            assert!(kv.log_prior().is_finite());
        }
    }
}
