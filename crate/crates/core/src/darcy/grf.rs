use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use super::Field;
use crate::error::{Error, Result};
use crate::ops;
use crate::rng;

/// Parameters of the thresholded Gaussian random field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSpec {
    /// Spectral decay exponent: power spectrum `(|πk|² + τ²)^(-alpha)`.
    pub alpha: f64,
    pub tau: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            tau: 3.0,
            low: 3.0,
            high: 12.0,
        }
    }
}

/// Zero-mean Gaussian random field on the `n × n` cell centres, synthesized
/// from a cosine series `Σ ξ_k σ_k cos(πk_x x) cos(πk_y y)` with
/// `σ_k = (π²|k|² + τ²)^(-α/2)`, `ξ_k ~ N(0,1)` and the constant mode dropped.
pub fn gaussian_random_field(n: usize, seed: u64, alpha: f64, tau: f64) -> Vec<f64> {
    let mut r = rng::rng_from(seed);
    let mut coeffs = vec![0.0; n * n];
    for kx in 0..n {
        for ky in 0..n {
            let xi: f64 = StandardNormal.sample(&mut r);
            if kx == 0 && ky == 0 {
                continue;
            }
            let k2 = PI * PI * (kx * kx + ky * ky) as f64;
            coeffs[kx * n + ky] = xi * (k2 + tau * tau).powf(-alpha / 2.0);
        }
    }
    // basis[i][k] = cos(π k x_i); field = B · C · Bᵀ
    let basis: Vec<f64> = (0..n * n)
        .map(|c| (PI * (c % n) as f64 * Field::coord(n, c / n)).cos())
        .collect();
    let mut basis_t = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            basis_t[k * n + i] = basis[i * n + k];
        }
    }
    let left = ops::matmul(&basis, &coeffs, n, n, n);
    ops::matmul(&left, &basis_t, n, n, n)
}

/// Binary coefficient: `high` where the random field is non-negative, `low`
/// elsewhere.
pub fn sample_coefficient_with(n: usize, seed: u64, spec: &CoefficientSpec) -> Result<Field> {
    if !(spec.low > 0.0) {
        return Err(Error::Config(format!(
            "coefficient low value must be positive (got {}); a = 0 makes the PDE degenerate",
            spec.low
        )));
    }
    if !(spec.high > spec.low) {
        return Err(Error::Config(format!(
            "coefficient high value {} must exceed low value {}",
            spec.high, spec.low
        )));
    }
    if n == 0 {
        return Err(Error::Config("grid side must be positive".into()));
    }
    let field = gaussian_random_field(n, seed, spec.alpha, spec.tau);
    let values = field
        .into_iter()
        .map(|v| if v >= 0.0 { spec.high } else { spec.low })
        .collect();
    Field::new(n, values)
}

pub fn sample_coefficient(n: usize, seed: u64, low: f64, high: f64) -> Result<Field> {
    sample_coefficient_with(
        n,
        seed,
        &CoefficientSpec {
            low,
            high,
            ..CoefficientSpec::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_two_values() {
        let a = sample_coefficient(16, 1, 3.0, 12.0).unwrap();
        assert!(a.values().iter().all(|&v| v == 3.0 || v == 12.0));
        assert!(a.values().contains(&3.0) && a.values().contains(&12.0));
    }

    #[test]
    fn seeded_determinism() {
        let a = sample_coefficient(16, 7, 3.0, 12.0).unwrap();
        let b = sample_coefficient(16, 7, 3.0, 12.0).unwrap();
        let c = sample_coefficient(16, 8, 3.0, 12.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_degenerate_values() {
        assert!(sample_coefficient(8, 0, 0.0, 1.0).is_err());
        assert!(sample_coefficient(8, 0, -1.0, 1.0).is_err());
        assert!(sample_coefficient(8, 0, 2.0, 2.0).is_err());
    }

    #[test]
    fn high_fraction_is_balanced_over_seeds() {
        let (mut high, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            let a = sample_coefficient(16, rng::indexed_seed(0, seed), 3.0, 12.0).unwrap();
            high += a.values().iter().filter(|&&v| v == 12.0).count();
            total += a.values().len();
        }
        let frac = high as f64 / total as f64;
        assert!((0.40..=0.60).contains(&frac), "{frac}");
    }
}
