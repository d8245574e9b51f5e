//! Dirichlet-process mixture over velocity vectors.
//!
//! The random mixing measure is represented as a finite list of occupied
//! components with Dirichlet weights plus a remainder `pi'` covering every
//! atom not yet instantiated. Slice variables `u_i` decide how many extra
//! atoms must be broken off the remainder before allocations are resampled.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, sample_inverse_wishart, symmetrize, MvnDensity};

/// Normal-inverse-Wishart base distribution `(m, c, nu, Psi)`:
/// `Sigma ~ IW(nu, Psi)`, `mu | Sigma ~ N(m, Sigma / c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    mean: DVector<f64>,
    precision_scale: f64,
    dof: f64,
    scale: DMatrix<f64>,
    scale_chol: DMatrix<f64>,
}

impl NiwParams {
    pub fn new(mean: Vec<f64>, precision_scale: f64, dof: f64, scale: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::config("NIW mean must be non-empty"));
        }
        if scale.nrows() != d || scale.ncols() != d {
            return Err(Error::config(format!(
                "NIW scale is {}x{}, expected {d}x{d}",
                scale.nrows(),
                scale.ncols()
            )));
        }
        if !(precision_scale > 0.0 && precision_scale.is_finite()) {
            return Err(Error::config("NIW precision scale c must be positive"));
        }
        if !(dof > d as f64 - 1.0) {
            return Err(Error::config(format!(
                "NIW degrees of freedom {dof} must exceed dimension - 1 = {}",
                d - 1
            )));
        }
        let scale_chol = Cholesky::new(scale.clone())
            .ok_or_else(|| Error::config("NIW scale matrix must be symmetric positive definite"))?
            .l();
        Ok(Self {
            mean: DVector::from_vec(mean),
            precision_scale,
            dof,
            scale,
            scale_chol,
        })
    }

    /// `(0, 1e-3, K + 2, I)` for velocity vectors of length `dim = K + 1`.
    pub fn weakly_informative(dim: usize) -> Self {
        Self::new(vec![0.0; dim], 1e-3, dim as f64 + 1.0, DMatrix::identity(dim, dim))
            .expect("identity scale is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision_scale(&self) -> f64 {
        self.precision_scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    /// Conjugate update with a set of observed velocity vectors.
    pub fn posterior<'a, I>(&self, velocities: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let d = self.dim();
        let mut n = 0usize;
        let mut sum = DVector::<f64>::zeros(d);
        let mut outer = DMatrix::<f64>::zeros(d, d);
        for v in velocities {
            if v.len() != d {
                return Err(Error::domain(format!("velocity of length {} (expected {d})", v.len())));
            }
            let v = DVector::from_column_slice(v);
            outer += &v * v.transpose();
            sum += v;
            n += 1;
        }
        if n == 0 {
            return Ok(self.clone());
        }
        let nf = n as f64;
        let c = self.precision_scale;
        let mean_v = &sum / nf;
        let scatter = outer - &mean_v * mean_v.transpose() * nf;
        let diff = &mean_v - &self.mean;
        let mut scale = &self.scale + scatter + (&diff * diff.transpose()) * (c * nf / (c + nf));
        symmetrize(&mut scale);
        let scale_chol = cholesky_with_jitter(scale.clone(), "NIW posterior scale")?.l();
        Ok(Self {
            mean: (&self.mean * c + sum) / (c + nf),
            precision_scale: c + nf,
            dof: self.dof + nf,
            scale,
            scale_chol,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let sigma = sample_inverse_wishart(self.dof, &self.scale_chol, rng)?;
        let scaled = &sigma / self.precision_scale;
        let mu = MvnDensity::new(&self.mean, &scaled)?.sample(rng);
        Ok((DVector::from_vec(mu), sigma))
    }
}

/// Draws `(mu, Sigma)` from the NIW posterior given a (possibly empty) set of velocities.
pub fn niw_posterior_draw<R: Rng + ?Sized>(
    prior: &NiwParams,
    velocities: &[&[f64]],
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    prior.posterior(velocities.iter().copied())?.sample(rng)
}

/// One Gaussian mixture component and its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    precision: DMatrix<f64>,
    precision_mean: Vec<f64>,
    density: MvnDensity,
    pub(crate) weight: f64,
}

impl Component {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, weight: f64) -> Result<Self> {
        let density = MvnDensity::new(&mu, &sigma)?;
        let precision = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::Numerical("component covariance is not SPD".into()))?
            .inverse();
        let precision_mean = (&precision * &mu).iter().copied().collect();
        Ok(Self {
            mu,
            sigma,
            precision,
            precision_mean,
            density,
            weight,
        })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `Sigma^{-1} mu`.
    pub fn precision_mean(&self) -> &[f64] {
        &self.precision_mean
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// `log N(beta; mu, Sigma)`.
    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        self.density.log_density(beta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    components: Vec<Component>,
    counts: Vec<usize>,
    remainder: f64,
    lambda: f64,
    slices: Vec<f64>,
    allocations: Vec<usize>,
}

const WEIGHT_TOLERANCE: f64 = 1e-12;

impl MixtureState {
    /// Builds a state from explicit parts; checks every invariant except the
    /// slice bound when `slices` is empty.
    pub fn new(
        components: Vec<Component>,
        remainder: f64,
        lambda: f64,
        allocations: Vec<usize>,
    ) -> Result<Self> {
        let mut counts = vec![0; components.len()];
        for &s in &allocations {
            if s >= components.len() {
                return Err(Error::domain(format!("allocation {s} has no component")));
            }
            counts[s] += 1;
        }
        let n = allocations.len();
        let state = Self {
            components,
            counts,
            remainder,
            lambda,
            slices: vec![],
            allocations,
        };
        state.check_invariants().map_err(Error::Domain)?;
        debug_assert_eq!(state.allocations.len(), n);
        Ok(state)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn allocations(&self) -> &[usize] {
        &self.allocations
    }

    pub fn slices(&self) -> &[f64] {
        &self.slices
    }

    pub fn remainder(&self) -> f64 {
        self.remainder
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_items(&self) -> usize {
        self.allocations.len()
    }

    /// Number of components with at least one member.
    pub fn n_occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn set_lambda(&mut self, lambda: f64) {
        debug_assert!(lambda > 0.0);
        self.lambda = lambda;
    }

    /// Draws `u_i ~ Uniform(0, pi_{s_i}]` using one generator per item.
    pub(crate) fn set_slices(&mut self, slices: Vec<f64>) {
        debug_assert_eq!(slices.len(), self.allocations.len());
        self.slices = slices;
    }

    pub(crate) fn clear_slices(&mut self) {
        self.slices.clear();
    }

    pub(crate) fn weight_of_allocation(&self, i: usize) -> f64 {
        self.components[self.allocations[i]].weight
    }

    pub fn min_slice(&self) -> f64 {
        self.slices.iter().copied().fold(1.0, f64::min)
    }

    /// Components whose weight exceeds slice `u`.
    pub fn eligible(&self, u: f64) -> impl Iterator<Item = usize> + '_ {
        self.components
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.weight > u)
            .map(|(g, _)| g)
    }

    /// Breaks the remainder into new components drawn from `base` until it
    /// is smaller than `u_min`. Returns how many components were added; more
    /// than [`stick_breaking_cap`] additions in one call is an error.
    pub fn stick_breaking_extend<R: Rng + ?Sized>(
        &mut self,
        u_min: f64,
        base: &NiwParams,
        rng: &mut R,
    ) -> Result<usize> {
        if !(u_min > 0.0 && u_min <= 1.0) {
            return Err(Error::domain(format!("smallest slice {u_min} outside (0, 1]")));
        }
        let cap = stick_breaking_cap(self.lambda, self.n_items());
        let stick = Beta::new(1.0, self.lambda)
            .map_err(|e| Error::Numerical(format!("stick-breaking Beta(1, {}): {e}", self.lambda)))?;
        let mut added = 0;
        while self.remainder >= u_min {
            if added >= cap {
                return Err(Error::StickBreakingCap { cap, u_min });
            }
            let gamma: f64 = stick.sample(rng);
            let (weights, rest) = break_stick(self.remainder, &[gamma]);
            let (mu, sigma) = base.sample(rng)?;
            self.components.push(Component::new(mu, sigma, weights[0])?);
            self.counts.push(0);
            self.remainder = rest;
            added += 1;
        }
        Ok(added)
    }

    /// Replaces all allocations at once and recounts component sizes.
    pub(crate) fn set_allocations(&mut self, allocations: Vec<usize>) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        for &s in &allocations {
            self.counts[s] += 1;
        }
        self.allocations = allocations;
    }

    /// Deletes unoccupied components, folds their weight into the remainder
    /// and relabels allocations contiguously in creation order.
    pub fn remove_empty_components(&mut self) {
        if self.counts.iter().all(|&c| c > 0) {
            return;
        }
        let mut relabel = vec![usize::MAX; self.components.len()];
        let mut kept = Vec::with_capacity(self.components.len());
        let mut kept_counts = Vec::with_capacity(self.components.len());
        for (g, (comp, &count)) in self.components.drain(..).zip(&self.counts).enumerate() {
            if count == 0 {
                self.remainder += comp.weight;
            } else {
                relabel[g] = kept.len();
                kept.push(comp);
                kept_counts.push(count);
            }
        }
        self.components = kept;
        self.counts = kept_counts;
        for s in &mut self.allocations {
            *s = relabel[*s];
        }
    }

    /// Installs new weights for the current components.
    pub(crate) fn set_weights(&mut self, weights: &[f64], remainder: f64) {
        debug_assert_eq!(weights.len(), self.components.len());
        for (c, &w) in self.components.iter_mut().zip(weights) {
            c.weight = w;
        }
        self.remainder = remainder;
    }

    pub(crate) fn set_component(&mut self, g: usize, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<()> {
        let w = self.components[g].weight;
        self.components[g] = Component::new(mu, sigma, w)?;
        Ok(())
    }

    /// Checks weight conservation, allocation validity and slice bounds.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(format!("concentration {} is not positive", self.lambda));
        }
        if !(self.remainder >= 0.0 && self.remainder < 1.0) {
            return Err(format!("remainder {} outside [0, 1)", self.remainder));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum::<f64>() + self.remainder;
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(format!("weights sum to {total}, not 1"));
        }
        if let Some(c) = self.components.iter().find(|c| !(c.weight >= 0.0)) {
            return Err(format!("negative component weight {}", c.weight));
        }
        for (i, &s) in self.allocations.iter().enumerate() {
            if s >= self.components.len() {
                return Err(format!("item {i} allocated to missing component {s}"));
            }
            if let Some(&u) = self.slices.get(i) {
                if u > self.components[s].weight {
                    return Err(format!(
                        "slice {u} of item {i} exceeds its component weight {}",
                        self.components[s].weight
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Upper bound on instantiated components: `10 E[G] + 100`.
pub fn stick_breaking_cap(lambda: f64, n: usize) -> usize {
    (10.0 * expected_components(lambda, n)).ceil() as usize + 100
}

/// Applies stick fractions `gammas` to a stick of length `remainder`;
/// returns the broken-off weights and the length left over.
pub fn break_stick(remainder: f64, gammas: &[f64]) -> (Vec<f64>, f64) {
    let mut rest = remainder;
    let weights = gammas
        .iter()
        .map(|&g| {
            let w = g * rest;
            rest -= w;
            w
        })
        .collect();
    (weights, rest)
}

/// Samples an index with probability proportional to `exp(logliks[g])`,
/// normalized with log-sum-exp.
pub fn sample_allocation<R: Rng + ?Sized>(logliks: &[f64], rng: &mut R) -> Result<usize> {
    if logliks.is_empty() {
        return Err(Error::Numerical("allocation with an empty eligible set".into()));
    }
    if logliks.len() == 1 {
        return Ok(0);
    }
    let max = logliks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numerical("all eligible components have zero likelihood".into()));
    }
    let total: f64 = logliks.iter().map(|l| (l - max).exp()).sum();
    let mut target = rng.random::<f64>() * total;
    for (g, l) in logliks.iter().enumerate() {
        target -= (l - max).exp();
        if target < 0.0 {
            return Ok(g);
        }
    }
    // rounding left a sliver of mass past the last term
    Ok(logliks
        .iter()
        .rposition(|l| l.is_finite())
        .expect("at least one finite log-likelihood"))
}

/// Draws `(pi_1, ..., pi_G, pi') ~ Dirichlet(N_1, ..., N_G, lambda)`.
pub fn resample_weights<R: Rng + ?Sized>(
    counts: &[usize],
    lambda: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::domain(format!("component {g} is empty; remove it before drawing weights")));
    }
    if !(lambda > 0.0) {
        return Err(Error::domain(format!("concentration must be positive, got {lambda}")));
    }
    let gamma = |shape: f64, rng: &mut R| -> Result<f64> {
        Gamma::new(shape, 1.0)
            .map(|g| g.sample(rng))
            .map_err(|e| Error::Numerical(format!("Gamma({shape}, 1): {e}")))
    };
    let mut raw = counts
        .iter()
        .map(|&c| gamma(c as f64, rng))
        .collect::<Result<Vec<_>>>()?;
    let rest = gamma(lambda, rng)?;
    let total = raw.iter().sum::<f64>() + rest;
    raw.iter_mut().for_each(|w| *w /= total);
    let remainder = (1.0 - raw.iter().sum::<f64>()).max(0.0);
    Ok((raw, remainder))
}

/// Shape and rate of a Gamma prior on the concentration parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Auxiliary-variable Gibbs update of the concentration:
/// `c ~ Beta(lambda, N)`, then `lambda ~ Gamma(a + G, b - ln c)`.
pub fn resample_concentration<R: Rng + ?Sized>(
    lambda: f64,
    n_occupied: usize,
    n_items: usize,
    prior: GammaPrior,
    rng: &mut R,
) -> Result<f64> {
    if !(lambda > 0.0) || n_occupied == 0 || n_items == 0 {
        return Err(Error::domain("concentration update needs lambda > 0, G >= 1, N >= 1"));
    }
    let c: f64 = Beta::new(lambda, n_items as f64)
        .map_err(|e| Error::Numerical(format!("Beta({lambda}, {n_items}): {e}")))?
        .sample(rng);
    let log_c = c.max(f64::MIN_POSITIVE).ln();
    let shape = prior.shape + n_occupied as f64;
    let rate = prior.rate - log_c;
    let draw: f64 = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numerical(format!("Gamma({shape}, rate {rate}): {e}")))?
        .sample(rng);
    Ok(draw.max(f64::MIN_POSITIVE))
}

/// Approximate prior mean of the number of occupied clusters, `lambda ln(1 + N / lambda)`.
pub fn expected_components(lambda: f64, n: usize) -> f64 {
    lambda * (1.0 + n as f64 / lambda).ln()
}

/// Sequential Polya-urn draw of a partition of `n` items (0-based labels in
/// order of first appearance).
pub fn crp_prior_simulate<R: Rng + ?Sized>(lambda: f64, n: usize, rng: &mut R) -> Vec<usize> {
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut target = rng.random::<f64>() * (lambda + i as f64);
        let mut chosen = sizes.len();
        for (g, &size) in sizes.iter().enumerate() {
            target -= size as f64;
            if target < 0.0 {
                chosen = g;
                break;
            }
        }
        if chosen == sizes.len() {
            sizes.push(0);
        }
        sizes[chosen] += 1;
        labels.push(chosen);
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_component(center: f64, weight: f64) -> Component {
        Component::new(DVector::from_element(2, center), DMatrix::identity(2, 2), weight).unwrap()
    }

    #[test]
    fn stick_product_formula() {
        let (w, rest) = break_stick(1.0, &[0.5, 0.5, 0.5]);
        assert_eq!(w, vec![0.5, 0.25, 0.125]);
        assert_eq!(rest, 0.125);
    }

    #[test]
    fn extend_is_identity_when_remainder_is_small() {
        let mut state =
            MixtureState::new(vec![unit_component(0.0, 0.995)], 0.005, 1.0, vec![0, 0]).unwrap();
        let before = state.clone();
        let added = state
            .stick_breaking_extend(0.01, &NiwParams::weakly_informative(2), &mut rng(1))
            .unwrap();
        assert_eq!(added, 0);
        assert_eq!(state, before);
    }

    #[test]
    fn extend_preserves_weights_and_reaches_target() {
        let base = NiwParams::weakly_informative(2);
        let mut r = rng(2);
        for _ in 0..200 {
            let mut state =
                MixtureState::new(vec![unit_component(0.0, 0.4)], 0.6, 1.5, vec![0; 5]).unwrap();
            state.stick_breaking_extend(0.02, &base, &mut r).unwrap();
            assert!(state.remainder() < 0.02);
            state.check_invariants().unwrap();
        }
    }

    #[test]
    fn extend_rejects_bad_slice_and_enforces_cap() {
        let base = NiwParams::weakly_informative(2);
        let mut state = MixtureState::new(vec![unit_component(0.0, 0.5)], 0.5, 1.0, vec![0]).unwrap();
        assert!(state.stick_breaking_extend(0.0, &base, &mut rng(3)).is_err());
        let err = state.stick_breaking_extend(1e-300, &base, &mut rng(3)).unwrap_err();
        assert!(matches!(err, Error::StickBreakingCap { .. }), "{err}");
    }

    /// Number of sticks needed to push the remainder of a unit stick below
    /// `u_min`, simulated directly from Beta(1, 1) fractions.
    fn sticks_needed_oracle(u_min: f64, r: &mut ChaCha8Rng) -> usize {
        let mut rest = 1.0;
        let mut n = 0;
        while rest >= u_min {
            rest *= 1.0 - r.random::<f64>();
            n += 1;
        }
        n
    }

    #[test]
    fn extension_count_matches_beta_one_one_simulation() {
        let base = NiwParams::new(vec![0.0], 1.0, 3.0, DMatrix::identity(1, 1)).unwrap();
        let reps = 100_000;
        let mut r = rng(4);
        let oracle: Vec<f64> = (0..reps).map(|_| sticks_needed_oracle(0.01, &mut r) as f64).collect();
        let mut r = rng(5);
        let sim: Vec<f64> = (0..reps)
            .map(|_| {
                let mut s = MixtureState::new(vec![], 1.0 - 1e-16, 1.0, vec![]).unwrap();
                s.remainder = 1.0;
                s.stick_breaking_extend(0.01, &base, &mut r).unwrap() as f64
            })
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let se = ((var(&oracle) + var(&sim)) / reps as f64).sqrt();
        assert!((mean(&oracle) - mean(&sim)).abs() < 4.0 * se, "{} vs {}", mean(&oracle), mean(&sim));
        // E[#sticks] = 1 + E[max n: sum of Exp(1) < ln(1/u)] = 1 + ln(100)
        assert!((mean(&oracle) - (1.0 + 100f64.ln())).abs() < 0.05);
    }

    #[test]
    fn allocation_examples() {
        let state = MixtureState::new(
            vec![unit_component(0.0, 0.6), unit_component(1.0, 0.4)],
            0.0,
            1.0,
            vec![0, 1],
        )
        .unwrap();
        let eligible: Vec<usize> = state.eligible(0.5).collect();
        assert_eq!(eligible, vec![0]);
        let mut r = rng(6);
        for _ in 0..100 {
            assert_eq!(sample_allocation(&[-3.0], &mut r).unwrap(), 0);
        }
        assert!(sample_allocation(&[], &mut r).is_err());
    }

    fn frequency_check(logliks: &[f64], reps: usize, seed: u64) {
        let mut r = rng(seed);
        let mut hits = vec![0usize; logliks.len()];
        for _ in 0..reps {
            hits[sample_allocation(logliks, &mut r).unwrap()] += 1;
        }
        let max = logliks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logliks.iter().map(|l| (l - max).exp()).sum();
        for (g, &h) in hits.iter().enumerate() {
            let p = (logliks[g] - max).exp() / z;
            let se = (p * (1.0 - p) / reps as f64).sqrt();
            let f = h as f64 / reps as f64;
            assert!((f - p).abs() < 3.0 * se.max(1e-9), "component {g}: {f} vs {p}");
        }
    }

    #[test]
    fn allocation_frequencies_follow_softmax() {
        assert_abs_diff_eq!((1f64).exp() / ((1f64).exp() + 1.0), 0.7310585786300049, epsilon = 1e-15);
        frequency_check(&[-1.0, -2.0], 100_000, 7);
        frequency_check(&[-5.0, -5.0], 100_000, 8);
        // magnitudes that would underflow without log-sum-exp
        frequency_check(&[-1200.0, -1201.5, -1199.2], 100_000, 9);
    }

    #[test]
    fn weight_means() {
        let mut r = rng(10);
        let reps = 100_000;
        let mut acc = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..reps {
            let (w, rest) = resample_weights(&[2, 2], 2.0, &mut r).unwrap();
            for (i, x) in [w[0], w[1], rest].into_iter().enumerate() {
                acc[i] += x;
                sq[i] += x * x;
            }
            assert_abs_diff_eq!(w[0] + w[1] + rest, 1.0, epsilon = 1e-12);
        }
        for i in 0..3 {
            let m = acc[i] / reps as f64;
            let se = ((sq[i] / reps as f64 - m * m) / reps as f64).sqrt();
            assert!((m - 1.0 / 3.0).abs() < 4.0 * se, "coordinate {i}: {m}");
        }
        let mut single = 0.0;
        for _ in 0..reps {
            single += resample_weights(&[400], 0.5, &mut r).unwrap().0[0];
        }
        assert_abs_diff_eq!(single / reps as f64, 400.0 / 400.5, epsilon = 1e-4);
        assert!(resample_weights(&[3, 0], 1.0, &mut r).is_err());
    }

    #[test]
    fn niw_posterior_examples() {
        let prior = NiwParams::weakly_informative(3);
        assert_eq!(prior.posterior(std::iter::empty()).unwrap(), prior);
        let post = prior.posterior([[1.0, -2.0, 0.5].as_slice()]).unwrap();
        for (m, v) in post.mean().iter().zip([1.0, -2.0, 0.5]) {
            assert!((m - v).abs() < 3e-3);
        }
        assert_eq!(post.dof(), prior.dof() + 1.0);
    }

    #[test]
    fn niw_posterior_mean_of_mu() {
        let prior =
            NiwParams::new(vec![0.5, -0.5], 2.0, 5.0, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]))
                .unwrap();
        let data = [[1.0, 0.0], [2.0, -1.0], [0.5, 0.3], [1.5, -0.7], [0.0, 0.2]];
        let rows: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        // closed form m_n = (c m + n xbar) / (c + n)
        let n = 5.0;
        let xbar = [5.0 / n, -1.2 / n];
        let m_n = [(2.0 * 0.5 + n * xbar[0]) / 7.0, (2.0 * -0.5 + n * xbar[1]) / 7.0];
        let mut r = rng(11);
        let reps = 100_000;
        let mut acc = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..reps {
            let (mu, sigma) = niw_posterior_draw(&prior, &rows, &mut r).unwrap();
            assert!(Cholesky::new(sigma).is_some());
            for i in 0..2 {
                acc[i] += mu[i];
                sq[i] += mu[i] * mu[i];
            }
        }
        for i in 0..2 {
            let m = acc[i] / reps as f64;
            let se = ((sq[i] / reps as f64 - m * m) / reps as f64).sqrt();
            assert!((m - m_n[i]).abs() < 4.0 * se, "coordinate {i}: {m} vs {}", m_n[i]);
        }
    }

    #[test]
    fn removing_empty_components_conserves_weight() {
        let mut state = MixtureState::new(
            vec![unit_component(0.0, 0.3), unit_component(1.0, 0.25), unit_component(2.0, 0.4)],
            0.05,
            1.0,
            vec![0, 2, 2, 0],
        )
        .unwrap();
        let untouched = {
            let mut s = state.clone();
            s.set_allocations(vec![0, 1, 2, 0]);
            s
        };
        let mut copy = untouched.clone();
        copy.remove_empty_components();
        assert_eq!(copy, untouched);

        state.remove_empty_components();
        assert_eq!(state.components().len(), 2);
        assert_eq!(state.allocations(), &[0, 1, 1, 0]);
        assert_abs_diff_eq!(state.remainder(), 0.3, epsilon = 1e-15);
        state.check_invariants().unwrap();
    }

    #[test]
    fn concentration_limit_case() {
        // with huge lambda the latent c is near one, so the rate stays near b
        let mut r = rng(12);
        let c: f64 = Beta::new(1e9, 400.0).unwrap().sample(&mut r);
        assert!(-c.ln() < 1e-5);
        assert!(resample_concentration(0.0, 1, 1, GammaPrior { shape: 2.0, rate: 4.0 }, &mut r).is_err());
    }

    /// Posterior mean of the concentration given G occupied of N items,
    /// by trapezoid quadrature of `Gamma(a, b) * lambda^G * prod 1/(lambda + i)`.
    fn concentration_posterior_mean(g: usize, n: usize, prior: GammaPrior) -> f64 {
        let log_post = |l: f64| {
            (prior.shape - 1.0 + g as f64) * l.ln() - prior.rate * l
                - (0..n).map(|i| (l + i as f64).ln()).sum::<f64>()
        };
        let (lo, hi, steps) = (1e-6, 60.0, 60_000);
        let h = (hi - lo) / steps as f64;
        let grid: Vec<f64> = (0..=steps).map(|j| lo + j as f64 * h).collect();
        let logs: Vec<f64> = grid.iter().map(|&l| log_post(l)).collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m) = (0.0, 0.0);
        for (j, (&l, &lp)) in grid.iter().zip(&logs).enumerate() {
            let w = if j == 0 || j == steps { 0.5 } else { 1.0 } * (lp - top).exp();
            z += w;
            m += w * l;
        }
        m / z
    }

    fn concentration_chain_mean(g: usize, n: usize, prior: GammaPrior, seed: u64) -> (f64, f64) {
        let mut r = rng(seed);
        let mut lambda = 1.0;
        let (batches, per_batch) = (50, 4000);
        let mut means = Vec::with_capacity(batches);
        for _ in 0..batches {
            let mut acc = 0.0;
            for _ in 0..per_batch {
                lambda = resample_concentration(lambda, g, n, prior, &mut r).unwrap();
                acc += lambda;
            }
            means.push(acc / per_batch as f64);
        }
        let m = means.iter().sum::<f64>() / batches as f64;
        let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        (m, (v / batches as f64).sqrt())
    }

    #[test]
    fn concentration_update_is_stationary() {
        let prior = GammaPrior { shape: 2.0, rate: 4.0 };
        let target = concentration_posterior_mean(4, 400, prior);
        let (m, se) = concentration_chain_mean(4, 400, prior, 21);
        assert!((m - target).abs() < 4.0 * se + 1e-3, "{m} vs {target} (se {se})");
    }

    #[test]
    fn every_item_alone_pushes_concentration_up() {
        let prior = GammaPrior { shape: 2.0, rate: 4.0 };
        let (few, _) = concentration_chain_mean(1, 20, prior, 22);
        let (all, se) = concentration_chain_mean(20, 20, prior, 23);
        let target = concentration_posterior_mean(20, 20, prior);
        assert!(all > 10.0 * few, "{all} vs {few}");
        assert!((all - target).abs() < 4.0 * se + 1e-2, "{all} vs {target}");
    }

    #[test]
    fn polya_urn_matches_stick_breaking_cluster_counts() {
        let (lambda, n, reps) = (1.0, 50, 40_000);
        let mut r = rng(24);
        let stick = Beta::new(1.0, lambda).unwrap();
        // bins: <=1, 2, ..., 7, >=8 occupied clusters
        let bin = |k: usize| k.clamp(1, 8) - 1;
        let mut urn = [0usize; 8];
        let mut sticks = [0usize; 8];
        for _ in 0..reps {
            urn[bin(*crp_prior_simulate(lambda, n, &mut r).iter().max().unwrap() + 1)] += 1;
            let mut weights: Vec<f64> = Vec::new();
            let mut rest = 1.0;
            let mut used = std::collections::HashSet::new();
            for _ in 0..n {
                let u: f64 = r.random();
                let mut cum = 0.0;
                let mut g = 0;
                loop {
                    if g == weights.len() {
                        let v: f64 = stick.sample(&mut r);
                        weights.push(v * rest);
                        rest -= v * rest;
                    }
                    cum += weights[g];
                    if u < cum {
                        break;
                    }
                    g += 1;
                }
                used.insert(g);
            }
            sticks[bin(used.len())] += 1;
        }
        // two-sample chi-square with 7 degrees of freedom; 0.999 quantile is 24.32
        let chi2: f64 = urn
            .iter()
            .zip(&sticks)
            .filter(|(a, b)| **a + **b > 0)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2) / (a + b) as f64)
            .sum();
        assert!(chi2 < 24.32, "chi-square {chi2}: {urn:?} vs {sticks:?}");
    }

    #[test]
    fn expected_components_values() {
        assert_abs_diff_eq!(expected_components(2.0, 400), 10.606609816118151, epsilon = 1e-12);
        assert_eq!(expected_components(3.0, 0), 0.0);
    }

    #[test]
    fn crp_small_cases() {
        let mut r = rng(13);
        for _ in 0..100 {
            assert_eq!(crp_prior_simulate(2.0, 1, &mut r), vec![0]);
        }
        let reps = 100_000;
        let lambda = 1.5;
        let two = (0..reps)
            .filter(|_| crp_prior_simulate(lambda, 2, &mut r) == vec![0, 1])
            .count() as f64
            / reps as f64;
        let p = lambda / (lambda + 1.0);
        assert!((two - p).abs() < 3.0 * (p * (1.0 - p) / reps as f64).sqrt());
    }

    #[test]
    fn crp_mean_tracks_expected_components() {
        let mut r = rng(14);
        let reps = 10_000;
        let total: usize = (0..reps)
            .map(|_| *crp_prior_simulate(5.0, 1000, &mut r).iter().max().unwrap() + 1)
            .sum();
        let mean = total as f64 / reps as f64;
        let expected = expected_components(5.0, 1000);
        assert!((mean - expected).abs() / expected < 0.05, "{mean} vs {expected}");
    }

    proptest! {
        #[test]
        fn weight_conservation_through_removal(
            weights in proptest::collection::vec(0.01f64..1.0, 1..8),
            alloc_seed in 0u64..1000,
        ) {
            let total: f64 = weights.iter().sum::<f64>() * 1.25;
            let comps: Vec<Component> = weights.iter()
                .map(|w| unit_component(0.0, w / total)).collect();
            let remainder = 1.0 - comps.iter().map(|c| c.weight).sum::<f64>();
            let g = comps.len();
            let mut r = rng(alloc_seed);
            let alloc: Vec<usize> = (0..10).map(|_| r.random_range(0..g)).collect();
            let mut state = MixtureState::new(comps, remainder, 1.0, alloc).unwrap();
            state.remove_empty_components();
            prop_assert!(state.counts().iter().all(|&c| c > 0));
            prop_assert!(state.check_invariants().is_ok());
        }
    }
}
