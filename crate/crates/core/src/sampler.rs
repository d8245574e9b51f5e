//! Gibbs sampler for the full model.
//!
//! One sweep updates, in order: slice variables, stick-breaking extension,
//! allocations, empty-component removal, the concentration, mixture weights,
//! component parameters, per-child `(alpha, beta)`, per-child knots (random
//! knot mode only) and the global parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;

use crate::cluster::canonical_labels;
use crate::dp::{
    niw_posterior_draw, resample_concentration, resample_weights, sample_allocation, Component,
    GammaPrior, MixtureState, NiwParams,
};
use crate::error::{Error, Result};
use crate::knots::{mh_knot_step, KnotVector};
use crate::linalg::{sample_canonical_normal, sample_canonical_normal_flat};
use crate::model::{dot, BasisCache, ChildRecord, ChildRegression, Cohort, GlobalParams};
use crate::rng::{Stage, Streams};
use crate::slice::{slice_sample, SliceSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotMode {
    Fixed,
    Random,
}

impl std::str::FromStr for KnotMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "random" => Ok(Self::Random),
            other => Err(Error::config(format!("knot mode must be fixed or random, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for KnotMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fixed => "fixed",
            Self::Random => "random",
        })
    }
}

/// Starting allocation of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// One component per child; components merge as the chain runs.
    #[default]
    Singletons,
    /// Every child in one shared component.
    Single,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singletons" => Ok(Self::Singletons),
            "single" => Ok(Self::Single),
            other => Err(Error::config(format!("init must be singletons or single, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Singletons => "singletons",
            Self::Single => "single",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    pub mu_alpha_mean: f64,
    pub mu_alpha_var: f64,
    /// Half-Cauchy scale on the intercept standard deviation.
    pub sigma_alpha_scale: f64,
    /// Half-Cauchy scale on the error standard deviation.
    pub sigma_eps_scale: f64,
    pub lambda: GammaPrior,
    /// Base distribution of the mixture; `None` means [`NiwParams::weakly_informative`].
    pub niw: Option<NiwParams>,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            mu_alpha_mean: 0.0,
            mu_alpha_var: 25.0,
            sigma_alpha_scale: 5.0,
            sigma_eps_scale: 5.0,
            lambda: GammaPrior {
                shape: 2.0,
                rate: 4.0,
            },
            niw: None,
        }
    }
}

impl Priors {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.mu_alpha_var > 0.0 && self.sigma_alpha_scale > 0.0 && self.sigma_eps_scale > 0.0) {
            return Err(Error::config("prior variances and scales must be positive"));
        }
        if !(self.lambda.shape > 0.0 && self.lambda.rate > 0.0) {
            return Err(Error::config("concentration prior shape and rate must be positive"));
        }
        if let Some(niw) = &self.niw {
            if niw.dim() != dim {
                return Err(Error::config(format!(
                    "base distribution has dimension {}, model needs {dim}",
                    niw.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Deliberate kernel corruption used to show the correctness harness has power.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum KernelFault {
    #[default]
    None,
    /// Multiplies the residual sum of squares seen by the error-variance update.
    ErrorVarianceScale(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub iterations: u64,
    pub burnin: u64,
    pub thin: u64,
    pub seed: u64,
    pub knot_mode: KnotMode,
    /// Knots shared by all children in fixed mode; `None` means equally spaced.
    pub fixed_knots: Option<KnotVector>,
    pub init: InitStrategy,
    pub priors: Priors,
    #[doc(hidden)]
    pub fault: KernelFault,
}

impl ChainConfig {
    /// 100 000 sweeps, 50 000 burn-in, every 20th retained.
    pub fn full_schedule(seed: u64, knot_mode: KnotMode) -> Self {
        Self {
            iterations: 100_000,
            burnin: 50_000,
            thin: 20,
            seed,
            knot_mode,
            fixed_knots: None,
            init: InitStrategy::default(),
            priors: Priors::default(),
            fault: KernelFault::None,
        }
    }

    /// 20 000 sweeps, 10 000 burn-in, every 10th retained.
    pub fn desk_schedule(seed: u64, knot_mode: KnotMode) -> Self {
        Self {
            iterations: 20_000,
            burnin: 10_000,
            thin: 10,
            ..Self::full_schedule(seed, knot_mode)
        }
    }

    /// Checks the schedule; returns a warning when no draw would be retained.
    pub fn validate(&self) -> Result<Option<String>> {
        if self.thin == 0 {
            return Err(Error::config("thin must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.burnin > self.iterations {
            return Err(Error::config(format!(
                "burn-in {} exceeds iterations {}",
                self.burnin, self.iterations
            )));
        }
        Ok((self.retained() == 0).then(|| {
            format!(
                "schedule retains no draws (iterations {}, burn-in {}, thin {})",
                self.iterations, self.burnin, self.thin
            )
        }))
    }

    pub fn retained(&self) -> u64 {
        self.iterations.saturating_sub(self.burnin) / self.thin.max(1)
    }
}

/// Sufficient statistics of one child's design for the regression updates.
#[derive(Debug, Clone, PartialEq)]
struct DesignStats {
    /// `B^T B`, row-major.
    btb: Vec<f64>,
    /// `B^T z`.
    btz: Vec<f64>,
    /// `B^T 1`.
    bt1: Vec<f64>,
    sum_z: f64,
}

impl DesignStats {
    fn new(cache: &BasisCache, haz: &[f64]) -> Self {
        let d = cache.dim();
        let mut stats = Self {
            btb: vec![0.0; d * d],
            btz: vec![0.0; d],
            bt1: vec![0.0; d],
            sum_z: haz.iter().sum(),
        };
        for (row, &z) in cache.rows().zip(haz) {
            for a in 0..d {
                stats.btz[a] += row[a] * z;
                stats.bt1[a] += row[a];
                for b in 0..d {
                    stats.btb[a * d + b] += row[a] * row[b];
                }
            }
        }
        stats
    }
}

/// Latent variables of one child.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildState {
    reg: ChildRegression,
    cache: BasisCache,
    stats: DesignStats,
    knot_accepted: u64,
    knot_proposed: u64,
}

impl ChildState {
    fn new(child: &ChildRecord, reg: ChildRegression) -> Self {
        let cache = BasisCache::new(child.times(), &reg.knots);
        let stats = DesignStats::new(&cache, child.haz());
        Self {
            reg,
            cache,
            stats,
            knot_accepted: 0,
            knot_proposed: 0,
        }
    }

    pub fn regression(&self) -> &ChildRegression {
        &self.reg
    }

    fn refresh(&mut self, child: &ChildRecord) {
        self.cache.rebuild(child.times(), &self.reg.knots);
        self.stats = DesignStats::new(&self.cache, child.haz());
    }

    fn rss(&self, child: &ChildRecord) -> f64 {
        self.cache
            .rows()
            .zip(child.haz())
            .map(|(row, z)| {
                let r = z - self.reg.alpha - dot(&self.reg.beta, row);
                r * r
            })
            .sum()
    }
}

/// All latent variables at one point of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub children: Vec<ChildState>,
    pub mixture: MixtureState,
    pub globals: GlobalParams,
}

/// Mixture component as recorded in a retained draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDraw {
    pub mu: Vec<f64>,
    /// Covariance, row-major.
    pub sigma: Vec<f64>,
    pub weight: f64,
    pub size: usize,
}

/// Retained snapshot of the chain with canonically relabelled allocations;
/// `components[g]` is the component of label `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: u64,
    pub allocations: Vec<usize>,
    pub components: Vec<ComponentDraw>,
    pub alpha: Vec<f64>,
    /// Per-child velocities, `N x (K + 1)` row-major.
    pub beta: Vec<f64>,
    /// Per-child knots, `N x K` row-major.
    pub knots: Vec<f64>,
    pub globals: GlobalParams,
    pub lambda: f64,
}

impl Draw {
    pub fn n_clusters(&self) -> usize {
        self.components.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub draws: Vec<Draw>,
    /// Occupied components after every sweep.
    pub g_trace: Vec<usize>,
    pub knot_accepted: Vec<u64>,
    pub knot_proposed: Vec<u64>,
    pub warnings: Vec<String>,
}

impl ChainOutput {
    /// Most frequent number of clusters among retained draws (smallest on ties).
    pub fn g_mode(&self) -> Option<usize> {
        let max = self.draws.iter().map(Draw::n_clusters).max()?;
        let mut counts = vec![0usize; max + 1];
        for d in &self.draws {
            counts[d.n_clusters()] += 1;
        }
        let best = *counts.iter().max()?;
        counts.iter().position(|&c| c == best)
    }

    pub fn allocation_draws(&self) -> Vec<Vec<usize>> {
        self.draws.iter().map(|d| d.allocations.clone()).collect()
    }

    /// Overall knot acceptance rate, `None` if no knot was proposed.
    pub fn knot_acceptance_rate(&self) -> Option<f64> {
        let proposed: u64 = self.knot_proposed.iter().sum();
        (proposed > 0).then(|| self.knot_accepted.iter().sum::<u64>() as f64 / proposed as f64)
    }
}

/// Mean and variance of the intercept full conditional.
pub fn alpha_conditional(
    child: &ChildRecord,
    reg: &ChildRegression,
    globals: &GlobalParams,
) -> Result<(f64, f64)> {
    let cache = BasisCache::new(child.times(), &reg.knots);
    let stats = DesignStats::new(&cache, child.haz());
    Ok(alpha_moments(&stats, child.n_obs(), &reg.beta, globals))
}

fn alpha_moments(stats: &DesignStats, n_obs: usize, beta: &[f64], g: &GlobalParams) -> (f64, f64) {
    let resid_sum = stats.sum_z - dot(beta, &stats.bt1);
    let precision = 1.0 / g.sigma2_alpha + n_obs as f64 / g.sigma2_eps;
    let mean = (g.mu_alpha / g.sigma2_alpha + resid_sum / g.sigma2_eps) / precision;
    (mean, 1.0 / precision)
}

/// Mean and covariance of the velocity full conditional given the child's
/// current component `(mu, sigma)`.
pub fn beta_conditional(
    child: &ChildRecord,
    reg: &ChildRegression,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sigma2_eps: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let component = Component::new(mu.clone(), sigma.clone(), 1.0)?;
    let cache = BasisCache::new(child.times(), &reg.knots);
    let stats = DesignStats::new(&cache, child.haz());
    let d = mu.len();
    let (precision, h) = beta_canonical(&stats, reg.alpha, &component, sigma2_eps);
    let precision = DMatrix::from_row_slice(d, d, &precision);
    let cov = precision
        .try_inverse()
        .ok_or_else(|| Error::Numerical("velocity conditional precision is singular".into()))?;
    let mean = &cov * DVector::from_vec(h);
    Ok((mean, cov))
}

/// Canonical parameters `(P, h)` of the velocity full conditional.
fn beta_canonical(
    stats: &DesignStats,
    alpha: f64,
    component: &Component,
    sigma2_eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let d = stats.bt1.len();
    let lam = component.precision();
    let mut precision = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            precision[a * d + b] = lam[(a, b)] + stats.btb[a * d + b] / sigma2_eps;
        }
    }
    let h = (0..d)
        .map(|a| component.precision_mean()[a] + (stats.btz[a] - alpha * stats.bt1[a]) / sigma2_eps)
        .collect();
    (precision, h)
}

/// Log full conditional of `eta = ln sigma` for a Gaussian scale with
/// half-Cauchy(`scale`) prior on `sigma`, given `n` residuals with sum of squares `ss`.
pub fn log_scale_conditional(eta: f64, n: usize, ss: f64, scale: f64) -> f64 {
    let s2 = (2.0 * eta).exp();
    -(n as f64) * eta - ss / (2.0 * s2) - (s2 / (scale * scale)).ln_1p() + eta
}

fn draw_scale<R: Rng + ?Sized>(current_var: f64, n: usize, ss: f64, scale: f64, rng: &mut R) -> Result<f64> {
    let eta0 = 0.5 * current_var.ln();
    let eta = slice_sample(
        eta0,
        |e| log_scale_conditional(e, n, ss, scale),
        SliceSettings::default(),
        rng,
    )?;
    Ok((2.0 * eta).exp())
}

/// Per-child least squares with a small ridge on `(alpha, beta)`.
fn ridge_fit(child: &ChildRecord, knots: &KnotVector) -> Result<(f64, Vec<f64>)> {
    const RIDGE: f64 = 1e-4;
    let cache = BasisCache::new(child.times(), knots);
    let d = cache.dim() + 1;
    let mut xtx = DMatrix::<f64>::identity(d, d) * RIDGE;
    let mut xtz = DVector::<f64>::zeros(d);
    let mut x = vec![1.0; d];
    for (row, &z) in cache.rows().zip(child.haz()) {
        x[1..].copy_from_slice(row);
        for a in 0..d {
            xtz[a] += x[a] * z;
            for b in 0..d {
                xtx[(a, b)] += x[a] * x[b];
            }
        }
    }
    let theta = xtx
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("initial fit for child {} failed", child.id())))?
        .solve(&xtz);
    Ok((theta[0], theta.iter().skip(1).copied().collect()))
}

/// Chain driver owning the cohort and the current state. Every random draw
/// comes from a substream keyed by stage, sweep and child, so the chain is
/// reproducible regardless of thread count.
#[derive(Debug, Clone)]
pub struct Sampler {
    cohort: Cohort,
    config: ChainConfig,
    niw: NiwParams,
    streams: Streams,
    state: ChainState,
    iteration: u64,
}

impl Sampler {
    /// Starts from the configured allocation, the prior-mean concentration
    /// and per-child least-squares regressions.
    pub fn new(cohort: Cohort, config: ChainConfig) -> Result<Self> {
        config.validate()?;
        config.priors.validate(cohort.dim())?;
        let streams = Streams::new(config.seed);
        let niw = config
            .priors
            .niw
            .clone()
            .unwrap_or_else(|| NiwParams::weakly_informative(cohort.dim()));
        let base_knots = initial_knots(&cohort, &config)?;
        let fits = cohort
            .children()
            .iter()
            .map(|c| ridge_fit(c, &base_knots))
            .collect::<Result<Vec<_>>>()?;
        let n = cohort.len() as f64;

        let alphas: Vec<f64> = fits.iter().map(|f| f.0).collect();
        let mu_alpha = alphas.iter().sum::<f64>() / n;
        let sigma2_alpha = (alphas.iter().map(|a| (a - mu_alpha).powi(2)).sum::<f64>() / n).max(1e-2);
        let lambda = config.priors.lambda.shape / config.priors.lambda.rate;
        let mut rng = streams.stream(Stage::Init, 0, 0);
        let mixture = match config.init {
            InitStrategy::Single => single_component_start(&fits, lambda, &mut rng)?,
            InitStrategy::Singletons => singleton_start(&fits, &niw, lambda, &mut rng)?,
        };

        let children: Vec<ChildState> = cohort
            .children()
            .iter()
            .zip(fits)
            .map(|(c, (alpha, beta))| {
                ChildState::new(c, ChildRegression::new(alpha, beta, base_knots.clone()).expect("dimensions match"))
            })
            .collect();
        let rss: f64 = children.iter().zip(cohort.children()).map(|(s, c)| s.rss(c)).sum();
        let sigma2_eps = (rss / cohort.total_obs() as f64).max(1e-2);

        let state = ChainState {
            children,
            mixture,
            globals: GlobalParams::new(mu_alpha, sigma2_alpha, sigma2_eps)?,
        };
        Ok(Self {
            cohort,
            config,
            niw,
            streams,
            state,
            iteration: 0,
        })
    }

    /// Starts from an explicit state; regressions are given per child.
    pub fn from_parts(
        cohort: Cohort,
        config: ChainConfig,
        regressions: Vec<ChildRegression>,
        mixture: MixtureState,
        globals: GlobalParams,
    ) -> Result<Self> {
        config.validate()?;
        config.priors.validate(cohort.dim())?;
        if regressions.len() != cohort.len() || mixture.n_items() != cohort.len() {
            return Err(Error::domain("state size does not match the cohort"));
        }
        let niw = config
            .priors
            .niw
            .clone()
            .unwrap_or_else(|| NiwParams::weakly_informative(cohort.dim()));
        let children = cohort
            .children()
            .iter()
            .zip(regressions)
            .map(|(c, r)| ChildState::new(c, r))
            .collect();
        Ok(Self {
            streams: Streams::new(config.seed),
            cohort,
            config,
            niw,
            state: ChainState {
                children,
                mixture,
                globals,
            },
            iteration: 0,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn cohort(&self) -> &Cohort {
        &self.cohort
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Replaces the scores of every child, keeping ages and latent variables.
    pub(crate) fn replace_scores(&mut self, scores: Vec<Vec<f64>>) -> Result<()> {
        let horizon = self.cohort.horizon();
        let children = self
            .cohort
            .children()
            .iter()
            .zip(scores)
            .map(|(c, z)| ChildRecord::new(c.id(), c.times().to_vec(), z, horizon))
            .collect::<Result<Vec<_>>>()?;
        self.cohort = Cohort::new(children, horizon, self.cohort.n_knots())?;
        for (s, c) in self.state.children.iter_mut().zip(self.cohort.children()) {
            s.refresh(c);
        }
        Ok(())
    }

    /// Runs one full sweep.
    pub fn sweep(&mut self) -> Result<()> {
        self.iteration += 1;
        let it = self.iteration;
        let invariant = |e: String| Error::Invariant {
            iteration: it,
            invariant: e,
        };

        // slice variables
        let mixture = &self.state.mixture;
        let slices: Vec<f64> = (0..mixture.n_items())
            .into_par_iter()
            .map(|i| {
                let mut rng = self.streams.stream(Stage::Slices, it, i as u64);
                let w = mixture.weight_of_allocation(i);
                loop {
                    let u = w * rng.random::<f64>();
                    if u > 0.0 {
                        break u;
                    }
                }
            })
            .collect();
        self.state.mixture.set_slices(slices);

        // extension
        let u_min = self.state.mixture.min_slice();
        let mut rng = self.streams.stream(Stage::Extension, it, 0);
        self.state.mixture.stick_breaking_extend(u_min, &self.niw, &mut rng)?;

        // allocations
        let mixture = &self.state.mixture;
        let allocations = self
            .state
            .children
            .par_iter()
            .enumerate()
            .map(|(i, child)| {
                let mut rng = self.streams.stream(Stage::Allocation, it, i as u64);
                let eligible: Vec<usize> = mixture.eligible(mixture.slices()[i]).collect();
                let logliks: Vec<f64> = eligible
                    .iter()
                    .map(|&g| mixture.components()[g].log_likelihood(&child.reg.beta))
                    .collect();
                sample_allocation(&logliks, &mut rng).map(|j| eligible[j])
            })
            .collect::<Result<Vec<_>>>()?;
        self.state.mixture.set_allocations(allocations);
        self.state.mixture.check_invariants().map_err(invariant)?;
        self.state.mixture.remove_empty_components();

        // concentration, then weights given the new concentration
        let mut rng = self.streams.stream(Stage::Concentration, it, 0);
        let lambda = resample_concentration(
            self.state.mixture.lambda(),
            self.state.mixture.n_occupied(),
            self.state.mixture.n_items(),
            self.config.priors.lambda,
            &mut rng,
        )?;
        self.state.mixture.set_lambda(lambda);
        let mut rng = self.streams.stream(Stage::Weights, it, 0);
        let (weights, remainder) = resample_weights(self.state.mixture.counts(), lambda, &mut rng)?;
        self.state.mixture.set_weights(&weights, remainder);
        self.state.mixture.clear_slices();

        // component parameters
        let g = self.state.mixture.components().len();
        let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); g];
        for (s, child) in self.state.mixture.allocations().iter().zip(&self.state.children) {
            members[*s].push(&child.reg.beta);
        }
        let params = members
            .par_iter()
            .enumerate()
            .map(|(gi, velocities)| {
                let mut rng = self.streams.stream(Stage::Components, it, gi as u64);
                niw_posterior_draw(&self.niw, velocities, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        for (gi, (mu, sigma)) in params.into_iter().enumerate() {
            self.state.mixture.set_component(gi, mu, sigma)?;
        }
        self.state.mixture.check_invariants().map_err(invariant)?;

        self.update_regressions()?;
        if self.config.knot_mode == KnotMode::Random {
            self.update_knots()?;
        }
        self.update_globals()?;
        self.check_child_invariants().map_err(invariant)
    }

    fn update_regressions(&mut self) -> Result<()> {
        let it = self.iteration;
        let globals = self.state.globals;
        let mixture = &self.state.mixture;
        let streams = &self.streams;
        self.state
            .children
            .par_iter_mut()
            .zip(self.cohort.children())
            .enumerate()
            .try_for_each(|(i, (state, child))| {
                let mut rng = streams.stream(Stage::ChildRegression, it, i as u64);
                let (mean, var) = alpha_moments(&state.stats, child.n_obs(), &state.reg.beta, &globals);
                state.reg.alpha = mean + var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let component = &mixture.components()[mixture.allocations()[i]];
                let d = state.reg.beta.len();
                let (mut precision, h) = beta_canonical(&state.stats, state.reg.alpha, component, globals.sigma2_eps);
                sample_canonical_normal_flat(
                    &mut precision,
                    &h,
                    d,
                    &mut rng,
                    &mut state.reg.beta,
                    "velocity conditional precision",
                )
            })
    }

    fn update_knots(&mut self) -> Result<()> {
        let it = self.iteration;
        let sigma2 = self.state.globals.sigma2_eps;
        let streams = &self.streams;
        self.state
            .children
            .par_iter_mut()
            .zip(self.cohort.children())
            .enumerate()
            .try_for_each(|(i, (state, child))| {
                let mut rng = streams.stream(Stage::Knots, it, i as u64);
                let mut moved = false;
                for k in 0..state.reg.knots.len() {
                    let (accepted, knots) = mh_knot_step(child, &state.reg, k, sigma2, &mut rng)?;
                    state.knot_proposed += 1;
                    if accepted {
                        state.knot_accepted += 1;
                        state.reg.knots = knots;
                        moved = true;
                    }
                }
                if moved {
                    state.refresh(child);
                }
                Ok(())
            })
    }

    fn update_globals(&mut self) -> Result<()> {
        let mut rng = self.streams.stream(Stage::Globals, self.iteration, 0);
        let priors = &self.config.priors;
        let g = &mut self.state.globals;
        let n = self.state.children.len();

        let sum_alpha: f64 = self.state.children.iter().map(|c| c.reg.alpha).sum();
        let precision = 1.0 / priors.mu_alpha_var + n as f64 / g.sigma2_alpha;
        let mean = (priors.mu_alpha_mean / priors.mu_alpha_var + sum_alpha / g.sigma2_alpha) / precision;
        g.mu_alpha = Normal::new(mean, precision.recip().sqrt())
            .map_err(|e| Error::Numerical(format!("intercept mean conditional: {e}")))?
            .sample(&mut rng);

        let ss_alpha: f64 = self
            .state
            .children
            .iter()
            .map(|c| (c.reg.alpha - g.mu_alpha).powi(2))
            .sum();
        g.sigma2_alpha = draw_scale(g.sigma2_alpha, n, ss_alpha, priors.sigma_alpha_scale, &mut rng)?;

        let mut rss: f64 = self
            .state
            .children
            .par_iter()
            .zip(self.cohort.children())
            .map(|(s, c)| s.rss(c))
            .sum();
        if let KernelFault::ErrorVarianceScale(f) = self.config.fault {
            rss *= f;
        }
        g.sigma2_eps = draw_scale(g.sigma2_eps, self.cohort.total_obs(), rss, priors.sigma_eps_scale, &mut rng)?;
        Ok(())
    }

    fn check_child_invariants(&self) -> std::result::Result<(), String> {
        let g = &self.state.globals;
        if !(g.sigma2_alpha > 0.0 && g.sigma2_eps > 0.0 && g.sigma2_alpha.is_finite() && g.sigma2_eps.is_finite()) {
            return Err(format!("variances ({}, {}) are not positive", g.sigma2_alpha, g.sigma2_eps));
        }
        for (i, c) in self.state.children.iter().enumerate() {
            for (k, &x) in c.reg.knots.xi().iter().enumerate() {
                let (lo, hi) = c.reg.knots.subinterval(k);
                if !(x > lo && x < hi) && self.config.knot_mode == KnotMode::Random {
                    return Err(format!("child {i}: knot {k} = {x} outside ({lo}, {hi})"));
                }
            }
            if !(c.reg.alpha.is_finite() && c.reg.beta.iter().all(|b| b.is_finite())) {
                return Err(format!("child {i}: non-finite regression coefficients"));
            }
        }
        Ok(())
    }

    /// Canonically relabelled snapshot of the current state.
    pub fn snapshot(&self) -> Draw {
        let mixture = &self.state.mixture;
        let raw: Vec<usize> = mixture.allocations().to_vec();
        let allocations = canonical_labels(&raw);
        let g = allocations.iter().max().map_or(0, |m| m + 1);
        let mut order = vec![usize::MAX; g];
        for (&r, &c) in raw.iter().zip(&allocations) {
            order[c] = r;
        }
        let components = order
            .iter()
            .map(|&r| {
                let comp = &mixture.components()[r];
                ComponentDraw {
                    mu: comp.mu().iter().copied().collect(),
                    sigma: comp.sigma().transpose().as_slice().to_vec(),
                    weight: comp.weight(),
                    size: mixture.counts()[r],
                }
            })
            .collect();
        let children = &self.state.children;
        Draw {
            iteration: self.iteration,
            allocations,
            components,
            alpha: children.iter().map(|c| c.reg.alpha).collect(),
            beta: children.iter().flat_map(|c| c.reg.beta.iter().copied()).collect(),
            knots: children.iter().flat_map(|c| c.reg.knots.xi().iter().copied()).collect(),
            globals: self.state.globals,
            lambda: mixture.lambda(),
        }
    }

    /// Runs the configured schedule.
    pub fn run(self) -> Result<ChainOutput> {
        self.run_with_progress(|_| {})
    }

    /// Runs the configured schedule, calling `progress` after every sweep.
    pub fn run_with_progress(mut self, mut progress: impl FnMut(u64)) -> Result<ChainOutput> {
        let warnings: Vec<String> = self.config.validate()?.into_iter().collect();
        for w in &warnings {
            log::warn!("{w}");
        }
        let mut draws = Vec::with_capacity(self.config.retained() as usize);
        let mut g_trace = Vec::with_capacity(self.config.iterations as usize);
        while self.iteration < self.config.iterations {
            self.sweep()?;
            g_trace.push(self.state.mixture.n_occupied());
            let it = self.iteration;
            if it > self.config.burnin && (it - self.config.burnin) % self.config.thin == 0 {
                draws.push(self.snapshot());
            }
            progress(it);
        }
        let (knot_accepted, knot_proposed) = self
            .state
            .children
            .iter()
            .map(|c| (c.knot_accepted, c.knot_proposed))
            .unzip();
        let output = ChainOutput {
            draws,
            g_trace,
            knot_accepted,
            knot_proposed,
            warnings,
        };
        if let Some(rate) = output.knot_acceptance_rate() {
            log::info!("knot acceptance rate {rate:.3}");
        }
        Ok(output)
    }
}

fn single_component_start<R: Rng + ?Sized>(
    fits: &[(f64, Vec<f64>)],
    lambda: f64,
    rng: &mut R,
) -> Result<MixtureState> {
    let n = fits.len() as f64;
    let d = fits[0].1.len();
    let mut mu = DVector::<f64>::zeros(d);
    for (_, beta) in fits {
        mu += DVector::from_column_slice(beta) / n;
    }
    let mut sigma = DMatrix::<f64>::identity(d, d) * 1e-2;
    for (_, beta) in fits {
        let diff = DVector::from_column_slice(beta) - &mu;
        sigma += &diff * diff.transpose() / n;
    }
    let weight: f64 = Beta::new(n, lambda)
        .map_err(|e| Error::Numerical(format!("initial weight: {e}")))?
        .sample(rng);
    let weight = weight.min(1.0 - f64::EPSILON);
    MixtureState::new(vec![Component::new(mu, sigma, weight)?], 1.0 - weight, lambda, vec![0; fits.len()])
}

fn singleton_start<R: Rng + ?Sized>(
    fits: &[(f64, Vec<f64>)],
    niw: &NiwParams,
    lambda: f64,
    rng: &mut R,
) -> Result<MixtureState> {
    let (weights, remainder) = resample_weights(&vec![1; fits.len()], lambda, rng)?;
    let components = fits
        .iter()
        .zip(weights)
        .map(|((_, beta), w)| {
            let (mu, sigma) = niw_posterior_draw(niw, &[beta.as_slice()], rng)?;
            Component::new(mu, sigma, w)
        })
        .collect::<Result<Vec<_>>>()?;
    MixtureState::new(components, remainder, lambda, (0..fits.len()).collect())
}

fn initial_knots(cohort: &Cohort, config: &ChainConfig) -> Result<KnotVector> {
    let (k, t) = (cohort.n_knots(), cohort.horizon());
    match config.knot_mode {
        KnotMode::Random => KnotVector::midpoints(k, t),
        KnotMode::Fixed => match &config.fixed_knots {
            Some(kv) if kv.len() != k || kv.horizon() != t => Err(Error::config(format!(
                "fixed knots have {} entries on horizon {}, cohort needs {k} on {t}",
                kv.len(),
                kv.horizon()
            ))),
            Some(kv) => Ok(kv.clone()),
            None => KnotVector::equally_spaced(k, t),
        },
    }
}

/// Runs a chain from the default initial state.
pub fn run_chain(cohort: &Cohort, config: &ChainConfig) -> Result<ChainOutput> {
    Sampler::new(cohort.clone(), config.clone())?.run()
}

/// Draws `(alpha, beta)` for one child through the dense reference path; used
/// to cross-check the cached sampler path.
#[doc(hidden)]
pub fn reference_regression_draw<R: Rng + ?Sized>(
    child: &ChildRecord,
    reg: &ChildRegression,
    component: (&DVector<f64>, &DMatrix<f64>),
    globals: &GlobalParams,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let (mean, var) = alpha_conditional(child, reg, globals)?;
    let alpha = mean + var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let with_alpha = ChildRegression {
        alpha,
        ..reg.clone()
    };
    let (m, cov) = beta_conditional(child, &with_alpha, component.0, component.1, globals.sigma2_eps)?;
    let precision = cov
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular conditional covariance".into()))?;
    let h = &precision * m;
    let beta = sample_canonical_normal(precision, &h, rng, "reference velocity draw")?;
    Ok((alpha, beta.iter().copied().collect()))
}
