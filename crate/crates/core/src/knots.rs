//! Child-specific change points.
//!
//! Knots carry an order-statistics prior: the density is proportional to the
//! product of the `K + 1` gaps between consecutive points of
//! `0 = xi_0 < xi_1 < ... < xi_K < xi_{K+1} = T`, restricted so that knot `k`
//! (0-based) lies strictly inside `(kT/K, (k+1)T/K)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{dot, fill_basis_row, ChildRecord, ChildRegression};

#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector {
    xi: Vec<f64>,
    horizon: f64,
}

impl KnotVector {
    /// Builds a knot vector, enforcing the one-knot-per-subinterval constraint.
    pub fn new(xi: Vec<f64>, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if xi.is_empty() {
            return Err(Error::domain("at least one knot is required"));
        }
        let k = xi.len();
        for (i, &x) in xi.iter().enumerate() {
            let (lo, hi) = subinterval(i, k, horizon);
            if !(x > lo && x < hi) {
                return Err(Error::domain(format!(
                    "knot {} = {x} lies outside its subinterval ({lo}, {hi})",
                    i + 1
                )));
            }
        }
        Ok(Self { xi, horizon })
    }

    /// Knots at the midpoints of the K constraint subintervals.
    pub fn midpoints(n_knots: usize, horizon: f64) -> Result<Self> {
        let xi = (0..n_knots)
            .map(|k| (k as f64 + 0.5) * horizon / n_knots as f64)
            .collect();
        Self::new(xi, horizon)
    }

    /// Knots splitting `[0, T]` into `K + 1` equal segments, as in the
    /// classical fixed-knot broken-stick model.
    pub fn equally_spaced(n_knots: usize, horizon: f64) -> Result<Self> {
        let xi = (1..=n_knots)
            .map(|k| k as f64 * horizon / (n_knots + 1) as f64)
            .collect();
        Self::new(xi, horizon)
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Open subinterval that knot `k` (0-based) must lie in.
    pub fn subinterval(&self, k: usize) -> (f64, f64) {
        subinterval(k, self.xi.len(), self.horizon)
    }

    /// Segment boundary `k` with the conventions `xi_0 = 0`, `xi_{K+1} = T`.
    pub(crate) fn boundary(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else if k > self.xi.len() {
            self.horizon
        } else {
            self.xi[k - 1]
        }
    }

    /// Replaces knot `k`. The caller guarantees the value is inside its subinterval.
    pub(crate) fn with_knot(&self, k: usize, value: f64) -> Self {
        let mut xi = self.xi.clone();
        xi[k] = value;
        debug_assert!({
            let (lo, hi) = self.subinterval(k);
            value > lo && value < hi
        });
        Self {
            xi,
            horizon: self.horizon,
        }
    }

    pub fn log_prior(&self) -> f64 {
        knot_prior_logdensity(&self.xi, self.horizon)
    }
}

fn subinterval(k: usize, n_knots: usize, horizon: f64) -> (f64, f64) {
    let width = horizon / n_knots as f64;
    (k as f64 * width, (k + 1) as f64 * width)
}

/// Unnormalized log prior density of a knot configuration; `-inf` if any knot
/// breaks the subinterval constraint.
pub fn knot_prior_logdensity(xi: &[f64], horizon: f64) -> f64 {
    let k = xi.len();
    for (i, &x) in xi.iter().enumerate() {
        let (lo, hi) = subinterval(i, k, horizon);
        if !(x > lo && x < hi) {
            return f64::NEG_INFINITY;
        }
    }
    let mut prev = 0.0;
    let mut total = 0.0;
    for &x in xi.iter().chain(std::iter::once(&horizon)) {
        total += (x - prev).ln();
        prev = x;
    }
    total
}

/// Exact draw from the knot prior: even order statistics of `2K + 1`
/// uniforms on `(0, T)`, rejected until the subinterval constraint holds.
pub fn knot_prior_sample<R: Rng + ?Sized>(n_knots: usize, horizon: f64, rng: &mut R) -> Result<KnotVector> {
    if n_knots == 0 || !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::domain("knot prior needs K >= 1 and a positive horizon"));
    }
    let mut points = vec![0.0; 2 * n_knots + 1];
    loop {
        for p in points.iter_mut() {
            *p = horizon * rng.random::<f64>();
        }
        points.sort_by(f64::total_cmp);
        let xi: Vec<f64> = points.iter().skip(1).step_by(2).copied().collect();
        if knot_prior_logdensity(&xi, horizon).is_finite() {
            return Ok(KnotVector { xi, horizon });
        }
    }
}

/// Log prior ratio for moving knot `k` from its current value to `proposal`.
fn log_prior_ratio(knots: &KnotVector, k: usize, proposal: f64) -> f64 {
    let left = knots.boundary(k);
    let right = knots.boundary(k + 2);
    let current = knots.xi[k];
    ((right - proposal) * (proposal - left)).ln() - ((right - current) * (current - left)).ln()
}

/// Change in the child's Gaussian log-likelihood when knot `k` moves to `proposal`.
///
/// Only observations later than `min(current, proposal)` change their fitted
/// value, since the trajectory is anchored at the intercept.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loglik_delta(
    times: &[f64],
    haz: &[f64],
    alpha: f64,
    beta: &[f64],
    knots: &KnotVector,
    k: usize,
    proposal: f64,
    sigma2_eps: f64,
) -> f64 {
    let moved = knots.with_knot(k, proposal);
    let lo = knots.xi[k].min(proposal);
    let start = times.partition_point(|&t| t <= lo);
    let mut row = vec![0.0; beta.len()];
    let mut delta_ss = 0.0;
    for (&t, &z) in times[start..].iter().zip(&haz[start..]) {
        fill_basis_row(t, knots, &mut row);
        let old = z - alpha - dot(beta, &row);
        fill_basis_row(t, &moved, &mut row);
        let new = z - alpha - dot(beta, &row);
        delta_ss += new * new - old * old;
    }
    -delta_ss / (2.0 * sigma2_eps)
}

/// Metropolis-Hastings acceptance probability for replacing knot `k` with `proposal`.
pub fn knot_acceptance_probability(
    child: &ChildRecord,
    reg: &ChildRegression,
    k: usize,
    proposal: f64,
    sigma2_eps: f64,
) -> Result<f64> {
    check_step_args(reg, k, sigma2_eps)?;
    let (lo, hi) = reg.knots.subinterval(k);
    if !(proposal > lo && proposal < hi) {
        return Ok(0.0);
    }
    let log_ratio = loglik_delta(
        child.times(),
        child.haz(),
        reg.alpha,
        &reg.beta,
        &reg.knots,
        k,
        proposal,
        sigma2_eps,
    ) + log_prior_ratio(&reg.knots, k, proposal);
    Ok(log_ratio.min(0.0).exp())
}

fn check_step_args(reg: &ChildRegression, k: usize, sigma2_eps: f64) -> Result<()> {
    if k >= reg.knots.len() {
        return Err(Error::domain(format!(
            "knot index {k} out of range for {} knots",
            reg.knots.len()
        )));
    }
    if !(sigma2_eps > 0.0) {
        return Err(Error::domain(format!("error variance must be positive, got {sigma2_eps}")));
    }
    Ok(())
}

/// One Metropolis-Hastings update of knot `k` (0-based) with a uniform
/// independence proposal over its constraint subinterval.
pub fn mh_knot_step<R: Rng + ?Sized>(
    child: &ChildRecord,
    reg: &ChildRegression,
    k: usize,
    sigma2_eps: f64,
    rng: &mut R,
) -> Result<(bool, KnotVector)> {
    check_step_args(reg, k, sigma2_eps)?;
    let proposal = propose(&reg.knots, k, rng);
    let log_ratio = loglik_delta(
        child.times(),
        child.haz(),
        reg.alpha,
        &reg.beta,
        &reg.knots,
        k,
        proposal,
        sigma2_eps,
    ) + log_prior_ratio(&reg.knots, k, proposal);
    if accept(log_ratio, rng) {
        Ok((true, reg.knots.with_knot(k, proposal)))
    } else {
        Ok((false, reg.knots.clone()))
    }
}

/// Uniform draw on the open subinterval of knot `k`.
pub(crate) fn propose<R: Rng + ?Sized>(knots: &KnotVector, k: usize, rng: &mut R) -> f64 {
    let (lo, hi) = knots.subinterval(k);
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if x > lo && x < hi {
            return x;
        }
    }
}

pub(crate) fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}
