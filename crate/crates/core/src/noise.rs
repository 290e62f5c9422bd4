//! Heavy-tailed samplers and tail diagnostics.
//!
//! Label generation uses the Cauchy distribution; gradient-noise injection
//! defaults to a symmetrized Pareto with shape in (1, 2], which keeps the
//! noise mean-zero with a finite s-th moment for s below the shape. Cauchy
//! has no mean at all, so it is reserved for labels and only median-unbiased
//! when injected.

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("noise scale must be positive, got {0}")]
    BadScale(f64),
    #[error("pareto shape must lie in (1, 3), got {0}")]
    BadShape(f64),
    #[error("empirical moment of an empty sample set")]
    EmptySamples,
    #[error("moment order s must lie in (1, 2], got {0}")]
    BadMomentOrder(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum NoiseSpec {
    Cauchy { scale: f64 },
    Pareto { scale: f64, shape: f64 },
    Gaussian { scale: f64 },
    None,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Cauchy { scale } | NoiseSpec::Gaussian { scale } => {
                if scale > 0.0 {
                    Ok(())
                } else {
                    Err(NoiseError::BadScale(scale))
                }
            }
            NoiseSpec::Pareto { scale, shape } => {
                if scale <= 0.0 {
                    Err(NoiseError::BadScale(scale))
                } else if shape <= 1.0 || shape >= 3.0 {
                    Err(NoiseError::BadShape(shape))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NoiseSpec::None)
    }
}

/// One draw from the spec's distribution.
///
/// Cauchy: `scale · tan(π(U − 1/2))`. Pareto: `scale · (U^{-1/shape} − 1)`
/// with a random sign, so the s-th absolute moment is finite exactly for
/// `s < shape`. Gaussian: standard normal times scale.
pub fn sample(spec: &NoiseSpec, rng: &mut StreamRng) -> f64 {
    match *spec {
        NoiseSpec::None => 0.0,
        NoiseSpec::Cauchy { scale } => {
            if scale == 0.0 {
                return 0.0;
            }
            let u = rng.open01();
            scale * (std::f64::consts::PI * (u - 0.5)).tan()
        }
        NoiseSpec::Pareto { scale, shape } => {
            if scale == 0.0 {
                return 0.0;
            }
            let u = rng.open01();
            let magnitude = scale * (u.powf(-1.0 / shape) - 1.0);
            if rng.open01() < 0.5 {
                -magnitude
            } else {
                magnitude
            }
        }
        NoiseSpec::Gaussian { scale } => {
            if scale == 0.0 {
                return 0.0;
            }
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            scale * z
        }
    }
}

/// Empirical s-th absolute moment `(1/n) Σ |x_i|^s`.
pub fn empirical_moment(samples: &[f64], s: f64) -> Result<f64, NoiseError> {
    if samples.is_empty() {
        return Err(NoiseError::EmptySamples);
    }
    if s <= 1.0 || s > 2.0 {
        return Err(NoiseError::BadMomentOrder(s));
    }
    Ok(samples.iter().map(|x| x.abs().powf(s)).sum::<f64>() / samples.len() as f64)
}

/// Adds i.i.d. per-coordinate noise to a gradient.
pub fn inject(gradient: &[f64], spec: &NoiseSpec, rng: &mut StreamRng) -> Vec<f64> {
    if spec.is_none() {
        return gradient.to_vec();
    }
    gradient.iter().map(|g| g + sample(spec, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(spec: &NoiseSpec, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::new(seed);
        (0..n).map(|_| sample(spec, &mut rng)).collect()
    }

    fn quantile(sorted: &[f64], q: f64) -> f64 {
        sorted[((sorted.len() as f64 * q) as usize).min(sorted.len() - 1)]
    }

    #[test]
    fn none_is_zero() {
        let mut rng = StreamRng::new(1);
        for _ in 0..10 {
            assert_eq!(sample(&NoiseSpec::None, &mut rng), 0.0);
        }
    }

    #[test]
    fn cauchy_median_and_iqr() {
        // Cauchy CDF (1/π)·arctan(x) + 1/2: median 0, quartiles at ±scale.
        let mut xs = draws(&NoiseSpec::Cauchy { scale: 1.0 }, 1_000_000, 42);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = quantile(&xs, 0.5);
        let iqr = quantile(&xs, 0.75) - quantile(&xs, 0.25);
        assert!(median.abs() < 0.05, "median {median}");
        assert!((iqr - 2.0).abs() < 0.1, "iqr {iqr}");
    }

    #[test]
    fn gaussian_second_moment() {
        let xs = draws(&NoiseSpec::Gaussian { scale: 1.0 }, 1_000_000, 7);
        let m2 = empirical_moment(&xs, 2.0).unwrap();
        assert!((m2 - 1.0).abs() < 0.02, "second moment {m2}");
    }

    #[test]
    fn moment_trivial_values() {
        assert_eq!(empirical_moment(&[0.0, 0.0, 0.0], 1.5).unwrap(), 0.0);
        assert_eq!(empirical_moment(&[1.0, -1.0], 2.0).unwrap(), 1.0);
        assert!(matches!(empirical_moment(&[], 1.5), Err(NoiseError::EmptySamples)));
    }

    #[test]
    fn inject_none_and_degenerate_scale() {
        let v = vec![1.0, -2.0, 3.0];
        let mut rng = StreamRng::new(3);
        assert_eq!(inject(&v, &NoiseSpec::None, &mut rng), v);
        assert_eq!(inject(&v, &NoiseSpec::Cauchy { scale: 0.0 }, &mut rng), v);
    }

    #[test]
    fn inject_gaussian_per_coordinate_variance() {
        let zero = vec![0.0; 10];
        let mut rng = StreamRng::new(5);
        let trials = 10_000;
        let mut sq = 0.0;
        for _ in 0..trials {
            let noisy = inject(&zero, &NoiseSpec::Gaussian { scale: 1.0 }, &mut rng);
            sq += noisy.iter().map(|x| x * x).sum::<f64>();
        }
        let per_coord = sq / (trials as f64 * 10.0);
        assert!((per_coord - 1.0).abs() < 0.05, "per-coordinate variance {per_coord}");
    }

    #[test]
    fn same_stream_is_bit_identical() {
        let a = draws(&NoiseSpec::Pareto { scale: 1.0, shape: 1.5 }, 1000, 99);
        let b = draws(&NoiseSpec::Pareto { scale: 1.0, shape: 1.5 }, 1000, 99);
        assert_eq!(a, b);
    }

    #[test]
    fn pareto_moment_growth_depends_on_order() {
        // Shape 1.5: the 2nd moment diverges (estimate grows with n), the
        // 1.2th is finite (estimate stabilizes).
        let xs = draws(&NoiseSpec::Pareto { scale: 1.0, shape: 1.5 }, 100_000, 6);
        let m = |n: usize, s: f64| empirical_moment(&xs[..n], s).unwrap();
        let heavy: Vec<f64> = [1_000, 10_000, 100_000].iter().map(|&n| m(n, 2.0)).collect();
        assert!(heavy[0] < heavy[1] && heavy[1] < heavy[2], "2nd moment not growing: {heavy:?}");
        let light: Vec<f64> = [1_000, 10_000, 100_000].iter().map(|&n| m(n, 1.2)).collect();
        let spread = (light[2] - light[0]).abs() / light[2];
        assert!(spread < 0.2, "1.2-moment should stabilize: {light:?}");
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(NoiseSpec::Cauchy { scale: -1.0 }.validate().is_err());
        assert!(NoiseSpec::Pareto { scale: 1.0, shape: 1.0 }.validate().is_err());
        assert!(NoiseSpec::Pareto { scale: 1.0, shape: 3.0 }.validate().is_err());
        assert!(NoiseSpec::Pareto { scale: 1.0, shape: 1.5 }.validate().is_ok());
    }
}
