//! Univariate slice sampling with stepping-out and shrinkage.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceSettings {
    /// Initial bracket width.
    pub width: f64,
    /// Maximum number of stepping-out steps.
    pub max_steps: usize,
}

impl Default for SliceSettings {
    fn default() -> Self {
        Self {
            width: 1.0,
            max_steps: 50,
        }
    }
}

/// One slice-sampling update of `x0` under the unnormalized log density `log_f`.
pub fn slice_sample<F, R>(x0: f64, log_f: F, settings: SliceSettings, rng: &mut R) -> Result<f64>
where
    F: Fn(f64) -> f64,
    R: Rng + ?Sized,
{
    let f0 = log_f(x0);
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("slice sampler started at {x0} with log density {f0}")));
    }
    let level = f0 + rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
    let w = settings.width;
    let mut left = x0 - w * rng.random::<f64>();
    let mut right = left + w;
    let m = settings.max_steps.max(1);
    let mut j = ((m as f64 * rng.random::<f64>()) as usize).min(m - 1);
    let mut k = m - 1 - j;
    while j > 0 && log_f(left) > level {
        left -= w;
        j -= 1;
    }
    while k > 0 && log_f(right) > level {
        right += w;
        k -= 1;
    }
    loop {
        let x = left + (right - left) * rng.random::<f64>();
        if log_f(x) > level {
            return Ok(x);
        }
        if x < x0 {
            left = x;
        } else {
            right = x;
        }
        if right - left < 1e-300 {
            return Ok(x0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = 0.0;
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            x = slice_sample(x, |v| -0.5 * v * v, SliceSettings::default(), &mut rng).unwrap();
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn rejects_start_outside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = slice_sample(-1.0, |v| if v > 0.0 { 0.0 } else { f64::NEG_INFINITY }, SliceSettings::default(), &mut rng);
        assert!(r.is_err());
    }
}
