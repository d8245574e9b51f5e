//! Synthetic paired cohorts for the simulation study.
//!
//! Both cohorts share every random quantity except the knot vectors: group
//! labels, intercepts, velocities, observation times and additive errors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::knots::KnotVector;
use crate::linalg::MvnDensity;
use crate::model::{trajectory_eval, ChildRecord, ChildRegression, Cohort};
use crate::rng::{Stage, Streams};

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub n_children: usize,
    pub alpha_mean: f64,
    pub alpha_var: f64,
    pub sigma2_eps: f64,
    /// One mean velocity vector (length `K + 1`) per group; groups are equally likely.
    pub group_means: Vec<Vec<f64>>,
    /// Isotropic within-group velocity variance.
    pub group_var: f64,
    pub min_obs: usize,
    pub max_obs: usize,
    pub horizon: f64,
    pub fixed_knots: Vec<f64>,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            n_children: 400,
            alpha_mean: 0.75,
            alpha_var: 0.5,
            sigma2_eps: 0.15,
            group_means: vec![
                vec![-3.0, -3.0, -3.0],
                vec![-7.5, -5.0, 0.0],
                vec![-3.0, -1.0, 3.0],
                vec![4.0, 1.0, -3.0],
            ],
            group_var: 0.2,
            min_obs: 10,
            max_obs: 20,
            horizon: 1.0,
            fixed_knots: vec![1.0 / 3.0, 2.0 / 3.0],
        }
    }
}

impl SimSpec {
    pub fn n_knots(&self) -> usize {
        self.fixed_knots.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_children == 0 {
            return Err(Error::config("number of children must be positive"));
        }
        if self.group_means.is_empty() {
            return Err(Error::config("at least one group is required"));
        }
        let dim = self.n_knots() + 1;
        if let Some(m) = self.group_means.iter().find(|m| m.len() != dim) {
            return Err(Error::config(format!(
                "group mean of length {} does not match {} knots",
                m.len(),
                self.n_knots()
            )));
        }
        if !(self.alpha_var > 0.0 && self.sigma2_eps > 0.0 && self.group_var > 0.0) {
            return Err(Error::config("simulation variances must be positive"));
        }
        if self.min_obs == 0 || self.min_obs > self.max_obs {
            return Err(Error::config(format!(
                "observation count range {}..={} is invalid",
                self.min_obs, self.max_obs
            )));
        }
        KnotVector::new(self.fixed_knots.clone(), self.horizon)
            .map_err(|e| Error::config(format!("fixed knots: {e}")))?;
        Ok(())
    }
}

/// Latent truth of one simulated child.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildTruth {
    pub id: String,
    /// 0-based group index.
    pub group: usize,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub random_knots: Vec<f64>,
    /// Additive errors, aligned with the child's sorted observation times.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedCohorts {
    pub fixed: Cohort,
    pub random: Cohort,
    pub truth: Vec<ChildTruth>,
}

impl PairedCohorts {
    pub fn true_labels(&self) -> Vec<usize> {
        self.truth.iter().map(|t| t.group).collect()
    }
}

pub fn generate_paired_cohorts(spec: &SimSpec, seed: u64) -> Result<PairedCohorts> {
    spec.validate()?;
    let streams = Streams::new(seed);
    let fixed_knots = KnotVector::new(spec.fixed_knots.clone(), spec.horizon)?;
    let dim = spec.n_knots() + 1;
    let cov = DMatrix::<f64>::identity(dim, dim) * spec.group_var;
    let groups = spec
        .group_means
        .iter()
        .map(|m| MvnDensity::new(&DVector::from_column_slice(m), &cov))
        .collect::<Result<Vec<_>>>()?;
    let width = spec.n_children.to_string().len();

    let mut fixed = Vec::with_capacity(spec.n_children);
    let mut random = Vec::with_capacity(spec.n_children);
    let mut truth = Vec::with_capacity(spec.n_children);
    for i in 0..spec.n_children {
        let mut rng = streams.stream(Stage::Simulation, 0, i as u64);
        let group = rng.random_range(0..groups.len());
        let alpha = spec.alpha_mean + spec.alpha_var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let beta = groups[group].sample(&mut rng);
        let n_obs = rng.random_range(spec.min_obs..=spec.max_obs);
        let mut times: Vec<f64> = (0..n_obs)
            .map(|_| loop {
                let t = spec.horizon * rng.random::<f64>();
                if t > 0.0 {
                    break t;
                }
            })
            .collect();
        times.sort_by(f64::total_cmp);
        let sd = spec.sigma2_eps.sqrt();
        let errors: Vec<f64> = (0..n_obs).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();

        let mut knot_rng = streams.stream(Stage::SimulationKnots, 0, i as u64);
        let random_knots = draw_uniform_knots(spec.n_knots(), spec.horizon, &mut knot_rng);
        let random_kv = KnotVector::new(random_knots.clone(), spec.horizon)?;

        let id = format!("child{:0width$}", i + 1);
        for (kv, out) in [(&fixed_knots, &mut fixed), (&random_kv, &mut random)] {
            let reg = ChildRegression::new(alpha, beta.clone(), kv.clone())?;
            let haz = times
                .iter()
                .zip(&errors)
                .map(|(&t, e)| trajectory_eval(&reg, t).map(|m| m + e))
                .collect::<Result<Vec<_>>>()?;
            out.push(ChildRecord::new(id.clone(), times.clone(), haz, spec.horizon)?);
        }
        truth.push(ChildTruth {
            id,
            group,
            alpha,
            beta,
            random_knots,
            errors,
        });
    }
    Ok(PairedCohorts {
        fixed: Cohort::new(fixed, spec.horizon, spec.n_knots())?,
        random: Cohort::new(random, spec.horizon, spec.n_knots())?,
        truth,
    })
}

/// One knot uniform on the interior of each constraint subinterval.
fn draw_uniform_knots<R: Rng + ?Sized>(n_knots: usize, horizon: f64, rng: &mut R) -> Vec<f64> {
    let width = horizon / n_knots as f64;
    (0..n_knots)
        .map(|k| {
            let (lo, hi) = (k as f64 * width, (k + 1) as f64 * width);
            loop {
                let x = lo + width * rng.random::<f64>();
                if x > lo && x < hi {
                    break x;
                }
            }
        })
        .collect()
}
