//! Small dense SPD helpers on top of nalgebra.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky factorization; on failure symmetrizes, adds `1e-10 * trace` to the
/// diagonal and retries once.
pub(crate) fn cholesky_with_jitter(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let mut fixed = m;
    symmetrize(&mut fixed);
    let jitter = 1e-10 * fixed.trace().abs().max(f64::MIN_POSITIVE);
    for i in 0..fixed.nrows() {
        fixed[(i, i)] += jitter;
    }
    log::warn!("{what} was not positive definite; retrying with jitter {jitter:e}");
    Cholesky::new(fixed).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Multivariate normal with a cached Cholesky factor for repeated density
/// evaluation. The factor is stored densely in row-major order so evaluation
/// does not allocate.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnDensity {
    dim: usize,
    mean: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl MvnDensity {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let dim = mean.len();
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Numerical("covariance failed Cholesky factorization".into()))?;
        let l = chol.l();
        let log_det_half: f64 = (0..dim).map(|i| l[(i, i)].ln()).sum();
        let mut flat = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                flat[i * dim + j] = l[(i, j)];
            }
        }
        Ok(Self {
            dim,
            mean: mean.iter().copied().collect(),
            chol: flat,
            log_norm: -0.5 * dim as f64 * (2.0 * PI).ln() - log_det_half,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        // forward substitution for L w = x - mean
        let mut w = [0.0f64; 16];
        let mut heap;
        let w: &mut [f64] = if self.dim <= 16 {
            &mut w[..self.dim]
        } else {
            heap = vec![0.0; self.dim];
            &mut heap
        };
        let mut quad = 0.0;
        for i in 0..self.dim {
            let row = &self.chol[i * self.dim..i * self.dim + i + 1];
            let mut acc = x[i] - self.mean[i];
            for j in 0..i {
                acc -= row[j] * w[j];
            }
            w[i] = acc / row[i];
            quad += w[i] * w[i];
        }
        self.log_norm - 0.5 * quad
    }

    /// Draws `mean + L z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        (0..self.dim)
            .map(|i| {
                self.mean[i]
                    + (0..=i)
                        .map(|j| self.chol[i * self.dim + j] * z[j])
                        .sum::<f64>()
            })
            .collect()
    }
}

/// Draws from `N(P^{-1} h, P^{-1})` given the precision `P` and the
/// precision-weighted mean `h`.
pub(crate) fn sample_canonical_normal<R: Rng + ?Sized>(
    precision: DMatrix<f64>,
    h: &DVector<f64>,
    rng: &mut R,
    what: &str,
) -> Result<DVector<f64>> {
    let chol = cholesky_with_jitter(precision, what)?;
    let mean = chol.solve(h);
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    // L^T x = z  gives  x ~ N(0, P^{-1})
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical(format!("{what}: singular factor")))?;
    Ok(mean + noise)
}

/// Inverse-Wishart draw via the Bartlett decomposition.
///
/// With `Psi = U U^T` and Bartlett factor `A` (lower triangular, `A_ii^2 ~
/// chi2(dof - i)`), `Sigma = (U A^{-T}) (U A^{-T})^T ~ IW(dof, Psi)`.
pub(crate) fn sample_inverse_wishart<R: Rng + ?Sized>(
    dof: f64,
    scale_chol: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = scale_chol.nrows();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(dof - i as f64)
            .map_err(|e| Error::Numerical(format!("Bartlett chi-square: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // B^T = A^{-1} U^T, solved from A B^T = U^T
    let bt = a
        .solve_lower_triangular(&scale_chol.transpose())
        .ok_or_else(|| Error::Numerical("degenerate Bartlett factor".into()))?;
    let mut sigma = bt.transpose() * &bt;
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// In-place Cholesky of a row-major `n x n` matrix; the lower triangle of
/// `a` is overwritten with `L`. Returns `false` if `a` is not positive definite.
pub(crate) fn cholesky_flat(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L x = b` in place.
pub(crate) fn solve_lower_flat(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place.
pub(crate) fn solve_lower_transpose_flat(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Flat-buffer version of [`sample_canonical_normal`]: overwrites `precision`
/// with its Cholesky factor and writes the draw into `out`.
pub(crate) fn sample_canonical_normal_flat<R: Rng + ?Sized>(
    precision: &mut [f64],
    h: &[f64],
    n: usize,
    rng: &mut R,
    out: &mut [f64],
    what: &str,
) -> Result<()> {
    let backup: Vec<f64> = precision.to_vec();
    if !cholesky_flat(precision, n) {
        precision.copy_from_slice(&backup);
        let trace: f64 = (0..n).map(|i| backup[i * n + i]).sum();
        let jitter = 1e-10 * trace.abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (backup[i * n + j] + backup[j * n + i]);
                precision[i * n + j] = v;
                precision[j * n + i] = v;
            }
            precision[i * n + i] += jitter;
        }
        log::warn!("{what} was not positive definite; retrying with jitter {jitter:e}");
        if !cholesky_flat(precision, n) {
            return Err(Error::Numerical(format!("{what} is not positive definite")));
        }
    }
    // mean = P^{-1} h via L L^T
    out.copy_from_slice(h);
    solve_lower_flat(precision, n, out);
    let mut z = [0.0f64; 16];
    let mut heap;
    let z: &mut [f64] = if n <= 16 {
        &mut z[..n]
    } else {
        heap = vec![0.0; n];
        &mut heap
    };
    for (zi, oi) in z.iter_mut().zip(out.iter()) {
        *zi = *oi + rng.sample::<f64, _>(StandardNormal);
    }
    solve_lower_transpose_flat(precision, n, z);
    out.copy_from_slice(z);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn density_matches_closed_form_in_two_dimensions() {
        let mean = DVector::from_vec(vec![1.0, -1.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let d = MvnDensity::new(&mean, &cov).unwrap();
        let x = [0.3, 0.2];
        let det: f64 = 2.0 * 1.0 - 0.36;
        let inv = DMatrix::from_row_slice(2, 2, &[1.0, -0.6, -0.6, 2.0]) / det;
        let diff = DVector::from_vec(vec![x[0] - 1.0, x[1] + 1.0]);
        let quad = (diff.transpose() * inv * &diff)[(0, 0)];
        let expected = -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad;
        assert_abs_diff_eq!(d.log_density(&x), expected, epsilon = 1e-13);
    }

    #[test]
    fn inverse_wishart_mean() {
        let psi = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 0.5]);
        let chol = Cholesky::new(psi.clone()).unwrap().l();
        let dof = 9.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            acc += sample_inverse_wishart(dof, &chol, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        let expected = psi / (dof - 3.0 - 1.0);
        for (a, b) in mean.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 0.01, "{mean} vs {expected}");
        }
    }

    #[test]
    fn canonical_normal_moments() {
        let p = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let h = DVector::from_vec(vec![1.0, 0.5]);
        let cov = p.clone().try_inverse().unwrap();
        let mean = &cov * &h;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n)
            .map(|_| sample_canonical_normal(p.clone(), &h, &mut rng, "test").unwrap())
            .collect();
        let m = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / n as f64;
        let c = draws
            .iter()
            .fold(DMatrix::zeros(2, 2), |a, d| a + (d - &m) * (d - &m).transpose())
            / n as f64;
        assert_abs_diff_eq!(m, mean, epsilon = 0.005);
        assert_abs_diff_eq!(c, cov, epsilon = 0.005);
    }

    #[test]
    fn flat_sampler_agrees_with_matrix_sampler() {
        let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let h = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let mut flat = p.transpose().as_slice().to_vec();
        let mut out = [0.0; 3];
        let mut r1 = ChaCha8Rng::seed_from_u64(21);
        sample_canonical_normal_flat(&mut flat, h.as_slice(), 3, &mut r1, &mut out, "test").unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(21);
        let reference = sample_canonical_normal(p, &h, &mut r2, "test").unwrap();
        for (a, b) in out.iter().zip(reference.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(cholesky_with_jitter(m, "test").is_ok());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(cholesky_with_jitter(bad, "test").is_err());
    }
}
