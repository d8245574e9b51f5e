//! Cohorts and the broken-stick regression function.
//!
//! A child's trajectory is continuous and piecewise linear in age:
//!
//! ```text
//! z(t) = alpha + sum_k beta_k * clamp(t - xi_k, 0, xi_{k+1} - xi_k)
//! ```
//!
//! with `xi_0 = 0` and `xi_{K+1} = T`, so `beta_k` is the velocity on
//! segment `[xi_k, xi_{k+1}]`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::knots::KnotVector;

/// Longitudinal HAZ observations of one child, sorted by age.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildRecord {
    id: String,
    times: Vec<f64>,
    haz: Vec<f64>,
}

impl ChildRecord {
    /// Validates and sorts (by age) the observations of one child.
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        haz: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        let id = id.into();
        if times.len() != haz.len() {
            return Err(Error::domain(format!(
                "child {id}: {} ages but {} scores",
                times.len(),
                haz.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::domain(format!("child {id} has no observations")));
        }
        if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && **t <= horizon)) {
            return Err(Error::domain(format!(
                "child {id}: age {t} outside [0, {horizon}]"
            )));
        }
        if let Some(z) = haz.iter().find(|z| !z.is_finite()) {
            return Err(Error::domain(format!("child {id}: non-finite score {z}")));
        }
        let mut pairs: Vec<(f64, f64)> = times.into_iter().zip(haz).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (times, haz) = pairs.into_iter().unzip();
        Ok(Self { id, times, haz })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn haz(&self) -> &[f64] {
        &self.haz
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    children: Vec<ChildRecord>,
    horizon: f64,
    n_knots: usize,
}

impl Cohort {
    pub fn new(children: Vec<ChildRecord>, horizon: f64, n_knots: usize) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::domain("cohort has no children"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if n_knots == 0 {
            return Err(Error::domain("number of knots must be positive"));
        }
        for c in &children {
            if c.times.iter().any(|&t| t > horizon) {
                return Err(Error::domain(format!(
                    "child {} has ages beyond the horizon {horizon}",
                    c.id
                )));
            }
        }
        Ok(Self {
            children,
            horizon,
            n_knots,
        })
    }

    pub fn children(&self) -> &[ChildRecord] {
        &self.children
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    /// Dimension of the velocity vectors, `K + 1`.
    pub fn dim(&self) -> usize {
        self.n_knots + 1
    }

    pub fn total_obs(&self) -> usize {
        self.children.iter().map(ChildRecord::n_obs).sum()
    }
}

/// Per-child regression parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildRegression {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub knots: KnotVector,
}

impl ChildRegression {
    pub fn new(alpha: f64, beta: Vec<f64>, knots: KnotVector) -> Result<Self> {
        if beta.len() != knots.len() + 1 {
            return Err(Error::domain(format!(
                "{} velocities for {} knots",
                beta.len(),
                knots.len()
            )));
        }
        Ok(Self { alpha, beta, knots })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalParams {
    pub mu_alpha: f64,
    pub sigma2_alpha: f64,
    pub sigma2_eps: f64,
}

impl GlobalParams {
    pub fn new(mu_alpha: f64, sigma2_alpha: f64, sigma2_eps: f64) -> Result<Self> {
        if !(sigma2_alpha > 0.0 && sigma2_eps > 0.0) {
            return Err(Error::domain("variances must be strictly positive"));
        }
        Ok(Self {
            mu_alpha,
            sigma2_alpha,
            sigma2_eps,
        })
    }
}

/// Writes the broken-stick basis at age `t` into `out` (length `K + 1`).
///
/// Segments are half-open `[xi_k, xi_{k+1})` except the last, which is closed at `T`.
pub(crate) fn fill_basis_row(t: f64, knots: &KnotVector, out: &mut [f64]) {
    let k = knots.len();
    debug_assert_eq!(out.len(), k + 1);
    for (seg, b) in out.iter_mut().enumerate() {
        let start = knots.boundary(seg);
        let end = knots.boundary(seg + 1);
        *b = (t - start).clamp(0.0, end - start);
    }
}

pub fn basis_row(t: f64, knots: &KnotVector) -> Result<Vec<f64>> {
    check_age(t, knots.horizon())?;
    let mut row = vec![0.0; knots.len() + 1];
    fill_basis_row(t, knots, &mut row);
    Ok(row)
}

fn check_age(t: f64, horizon: f64) -> Result<()> {
    if !(t >= 0.0 && t <= horizon) {
        return Err(Error::domain(format!("age {t} outside [0, {horizon}]")));
    }
    Ok(())
}

pub fn trajectory_eval(reg: &ChildRegression, t: f64) -> Result<f64> {
    let row = basis_row(t, &reg.knots)?;
    Ok(reg.alpha + dot(&reg.beta, &row))
}

/// Gaussian log-likelihood of a child's observations around its trajectory.
pub fn child_loglik(child: &ChildRecord, reg: &ChildRegression, sigma2_eps: f64) -> Result<f64> {
    if !(sigma2_eps > 0.0) {
        return Err(Error::domain(format!("error variance must be positive, got {sigma2_eps}")));
    }
    let mut row = vec![0.0; reg.beta.len()];
    let mut ss = 0.0;
    for (&t, &z) in child.times.iter().zip(&child.haz) {
        check_age(t, reg.knots.horizon())?;
        fill_basis_row(t, &reg.knots, &mut row);
        let r = z - reg.alpha - dot(&reg.beta, &row);
        ss += r * r;
    }
    let n = child.n_obs() as f64;
    Ok(-0.5 * n * (2.0 * PI * sigma2_eps).ln() - ss / (2.0 * sigma2_eps))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Basis rows for every observation of one child, stored row-major.
///
/// Rebuilt whenever the child's knots move; the sampler keeps one per child.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisCache {
    dim: usize,
    rows: Vec<f64>,
}

impl BasisCache {
    pub fn new(times: &[f64], knots: &KnotVector) -> Self {
        let mut cache = Self {
            dim: knots.len() + 1,
            rows: vec![0.0; times.len() * (knots.len() + 1)],
        };
        cache.rebuild(times, knots);
        cache
    }

    pub fn rebuild(&mut self, times: &[f64], knots: &KnotVector) {
        for (row, &t) in self.rows.chunks_exact_mut(self.dim).zip(times) {
            fill_basis_row(t, knots, row);
        }
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks_exact(self.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}
