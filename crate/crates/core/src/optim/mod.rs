//! D-NSVRGDA: decentralized normalized stochastic variance-reduced gradient
//! descent ascent, plus its unnormalized ablation (D-SVRGDA) and the
//! theory-derived hyperparameter schedule.
//!
//! One iteration runs four synchronized phases on every worker:
//!
//! 1. recursive variance-reduced estimators for the six gradient streams
//!    (`∇₁f`, `∇₁g(x,y)`, `∇₁g(x,z)`, `∇₂f`, `∇₂g(x,y)`, `∇₂g(x,z)`), each
//!    evaluating one fresh batch at the current and previous iterates;
//! 2. per-variable combination `u = u₁ + (u₂−u₃)/δ`, `v = v₁ + v₂/δ`,
//!    `w = w₁/δ`;
//! 3. gradient tracking with gossip mixing of the trackers;
//! 4. a step of length exactly `η` along the normalized tracked direction
//!    (or a raw `−η·tracker` step in the ablation), followed by gossip
//!    mixing of the variables.

mod runner;

pub use runner::{
    init, normalized_step_and_mix, run_iteration, track_and_mix, Divergence, RunOptions, RunOutput, Runner,
    StepEvent, StepReport, TrackerKind, VarKind, WorkerSnapshot, WorkerState, EPS_NORM,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HyperParamError {
    #[error("step size {name} must be positive, got {value}")]
    BadStepSize { name: &'static str, value: f64 },
    #[error("momentum coefficient {name} must lie in (0, 1], got {value}")]
    BadGamma { name: &'static str, value: f64 },
    #[error("penalty parameter delta must be positive, got {0}")]
    BadDelta(f64),
    #[error("batch sizes must satisfy batch0 >= batch >= 1, got batch0={batch0} batch={batch}")]
    BadBatches { batch0: usize, batch: usize },
    #[error("iteration count must be at least 1")]
    BadIterations,
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("tail index s must lie in (1, 2], got {0}")]
    BadTailIndex(f64),
    #[error("constant {name} must be positive, got {value}")]
    BadConstant { name: &'static str, value: f64 },
    #[error("second eigenvalue magnitude must lie in [0, 1), got {0}")]
    BadLambda(f64),
}

/// Step sizes, momentum coefficients, penalty, batch sizes, and variant
/// flags for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta_x: f64,
    pub eta_y: f64,
    pub eta_z: f64,
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub gamma_z: f64,
    pub delta: f64,
    /// Batch size of the first iteration.
    pub batch0: usize,
    /// Batch size of every later iteration.
    pub batch: usize,
    pub iterations: usize,
    /// `false` switches off step normalization (the D-SVRGDA ablation).
    pub normalized: bool,
    /// `false` forces all momentum coefficients to 1, collapsing the
    /// recursive estimators to plain stochastic gradients.
    pub variance_reduced: bool,
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), HyperParamError> {
        for (name, value) in [("eta_x", self.eta_x), ("eta_y", self.eta_y), ("eta_z", self.eta_z)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(HyperParamError::BadStepSize { name, value });
            }
        }
        for (name, value) in [("gamma_x", self.gamma_x), ("gamma_y", self.gamma_y), ("gamma_z", self.gamma_z)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(HyperParamError::BadGamma { name, value });
            }
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(HyperParamError::BadDelta(self.delta));
        }
        if self.batch < 1 || self.batch0 < self.batch {
            return Err(HyperParamError::BadBatches { batch0: self.batch0, batch: self.batch });
        }
        if self.iterations < 1 {
            return Err(HyperParamError::BadIterations);
        }
        Ok(())
    }

    /// Applies the variant flags: `variance_reduced = false` is defined as
    /// running with all momentum coefficients equal to 1.
    pub fn resolved(&self) -> Self {
        let mut hp = self.clone();
        if !hp.variance_reduced {
            hp.gamma_x = 1.0;
            hp.gamma_y = 1.0;
            hp.gamma_z = 1.0;
        }
        hp
    }
}

/// Problem constants feeding the theoretical schedule. These are inputs,
/// not estimates: smoothness and PL constants of the instance, the noise
/// tail index and scale, the mixing-matrix second eigenvalue, and the one
/// scalar `c` standing in for every hidden constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// Noise tail index in (1, 2].
    pub s: f64,
    /// Noise scale.
    pub sigma: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub ell_f: f64,
    pub ell_g: f64,
    /// Bound on the upper-level gradient in its second argument.
    pub c_f: f64,
    /// PL constant of the lower-level problem.
    pub mu: f64,
    /// Second-largest eigenvalue magnitude of the mixing matrix.
    pub lambda: f64,
    /// The single scalar collapsing all hidden schedule constants.
    pub c: f64,
}

impl TheoryConstants {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.s > 1.0 && self.s <= 2.0) {
            return Err(ScheduleError::BadTailIndex(self.s));
        }
        for (name, value) in [
            ("sigma", self.sigma),
            ("l_f", self.l_f),
            ("l_g", self.l_g),
            ("ell_f", self.ell_f),
            ("ell_g", self.ell_g),
            ("c_f", self.c_f),
            ("mu", self.mu),
            ("c", self.c),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ScheduleError::BadConstant { name, value });
            }
        }
        if !(self.lambda >= 0.0 && self.lambda < 1.0) {
            return Err(ScheduleError::BadLambda(self.lambda));
        }
        Ok(())
    }

    /// `ℓ = max{L_f, L_g, ℓ_f, ℓ_g}`.
    pub fn ell(&self) -> f64 {
        self.l_f.max(self.l_g).max(self.ell_f).max(self.ell_g)
    }

    /// Condition number `ℓ/μ`.
    pub fn kappa(&self) -> f64 {
        self.ell() / self.mu
    }
}

/// Hyperparameters prescribed by the convergence theory for `workers`
/// devices and `iterations` steps:
///
/// ```text
/// γ   = min{1, c·K^{1/(2s+1)} · T^{-2s/(2s+1)} · σ^{-3s/((2s+1)(s-1))}}
/// η_x = c·(1-λ)/(κ⁵ℓ) · K^{1/(2s+1)} · T^{-2s/(2s+1)} · σ^{-(4-s)/(2(2s+1)(s-1))}
/// η_y = η_x · 4(δL_f + L_g)/μ          η_z = η_x · 4L_g/μ
/// B₀  = ⌈c·K^{2s/(2s+1)} · T^{2s/(2s+1)} · σ^{s(4s-1)/((2s+1)(s-1)²)}⌉
/// δ   = c/(κ³ℓ) · (KT)^{-(s-1)/(2s+1)}
/// ```
///
/// with per-step batch size 1 (the "O(1)" of the theory).
pub fn theory_schedule(
    constants: &TheoryConstants,
    workers: usize,
    iterations: usize,
) -> Result<HyperParams, ScheduleError> {
    constants.validate()?;
    assert!(workers >= 1 && iterations >= 1);
    let s = constants.s;
    let sigma = constants.sigma;
    let k = workers as f64;
    let t = iterations as f64;
    let two_s1 = 2.0 * s + 1.0;
    let ell = constants.ell();
    let kappa = constants.kappa();
    let c = constants.c;

    let gamma_raw = c * k.powf(1.0 / two_s1) * t.powf(-2.0 * s / two_s1)
        * sigma.powf(-3.0 * s / (two_s1 * (s - 1.0)));
    let gamma = gamma_raw.min(1.0);

    let delta = c / (kappa.powi(3) * ell) * (k * t).powf(-(s - 1.0) / two_s1);

    let eta_x = c * (1.0 - constants.lambda) / (kappa.powi(5) * ell)
        * k.powf(1.0 / two_s1)
        * t.powf(-2.0 * s / two_s1)
        * sigma.powf(-(4.0 - s) / (2.0 * two_s1 * (s - 1.0)));
    let eta_y = eta_x * 4.0 * (delta * constants.l_f + constants.l_g) / constants.mu;
    let eta_z = eta_x * 4.0 * constants.l_g / constants.mu;

    let batch0 = (c
        * k.powf(2.0 * s / two_s1)
        * t.powf(2.0 * s / two_s1)
        * sigma.powf(s * (4.0 * s - 1.0) / (two_s1 * (s - 1.0).powi(2))))
    .ceil()
    .max(1.0) as usize;

    Ok(HyperParams {
        eta_x,
        eta_y,
        eta_z,
        gamma_x: gamma,
        gamma_y: gamma,
        gamma_z: gamma,
        delta,
        batch0,
        batch: 1,
        iterations,
        normalized: true,
        variance_reduced: true,
    })
}

/// Dominant term of the predicted convergence rate,
/// `κ⁴ℓ·σ^{(2s-2)/(2s+1)} / (KT)^{(s-1)/(2s+1)}`, together with the
/// magnitude of the exponent on `T`.
pub fn dominant_rate(constants: &TheoryConstants, workers: usize, iterations: usize) -> (f64, f64) {
    let s = constants.s;
    let exponent = (s - 1.0) / (2.0 * s + 1.0);
    let value = constants.kappa().powi(4)
        * constants.ell()
        * constants.sigma.powf((2.0 * s - 2.0) / (2.0 * s + 1.0))
        / ((workers as f64) * (iterations as f64)).powf(exponent);
    (value, exponent)
}

/// One recursive variance-reduction update:
/// `(1-γ)(prev_est − grad_prev) + grad_curr`, or plain `grad_curr` on the
/// first iteration. `grad_curr` and `grad_prev` must come from the same
/// fresh batch.
pub fn storm_update(
    prev_est: &[f64],
    grad_curr: &[f64],
    grad_prev: &[f64],
    gamma: f64,
    is_first: bool,
) -> Vec<f64> {
    if is_first {
        return grad_curr.to_vec();
    }
    assert_eq!(prev_est.len(), grad_curr.len(), "estimator dimension mismatch");
    assert_eq!(grad_prev.len(), grad_curr.len(), "estimator dimension mismatch");
    let keep = 1.0 - gamma;
    prev_est
        .iter()
        .zip(grad_prev)
        .zip(grad_curr)
        .map(|((e, gp), gc)| keep * (e - gp) + gc)
        .collect()
}

/// Combines the six stream estimators into one estimator per variable:
/// `u = u₁ + (u₂ − u₃)/δ`, `v = v₁ + v₂/δ`, `w = w₁/δ`.
pub fn combine(
    u1: &[f64],
    u2: &[f64],
    u3: &[f64],
    v1: &[f64],
    v2: &[f64],
    w1: &[f64],
    delta: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    assert!(delta > 0.0, "delta must be positive");
    let inv = 1.0 / delta;
    let u = u1.iter().zip(u2).zip(u3).map(|((a, b), c)| a + inv * (b - c)).collect();
    let v = v1.iter().zip(v2).map(|(a, b)| a + inv * b).collect();
    let w = w1.iter().map(|a| inv * a).collect();
    (u, v, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(s: f64, sigma: f64) -> TheoryConstants {
        TheoryConstants {
            s,
            sigma,
            l_f: 1.0,
            l_g: 1.5,
            ell_f: 1.0,
            ell_g: 1.0,
            c_f: 1.0,
            mu: 0.5,
            lambda: 0.5,
            c: 1.0,
        }
    }

    #[test]
    fn storm_gamma_one_ignores_history() {
        let prev = vec![100.0, -50.0];
        let cur = vec![1.0, 2.0];
        let prev_grad = vec![7.0, 7.0];
        assert_eq!(storm_update(&prev, &cur, &prev_grad, 1.0, false), cur);
    }

    #[test]
    fn storm_first_iteration_returns_batch_average() {
        let cur = vec![3.0, 4.0];
        assert_eq!(storm_update(&[], &cur, &[], 0.1, true), cur);
    }

    #[test]
    fn storm_vanishing_correction() {
        // prev_est == grad_prev: output is grad_curr for any gamma.
        let prev = vec![0.25, -1.5];
        let cur = vec![9.0, 8.0];
        for gamma in [0.05, 0.5, 0.9] {
            assert_eq!(storm_update(&prev, &cur, &prev, gamma, false), cur);
        }
    }

    #[test]
    fn combine_cancellation_and_arithmetic() {
        let g = vec![2.0, -3.0];
        let zero = vec![0.0, 0.0];
        let (u, _, _) = combine(&g, &g, &g, &zero, &zero, &zero, 0.7);
        assert_eq!(u, g);
        let (u, v, w) = combine(&g, &g, &g, &g, &g, &g, 1.0);
        assert_eq!(u, g);
        assert_eq!(v, vec![4.0, -6.0]);
        assert_eq!(w, g);
    }

    #[test]
    fn combine_scalar_division() {
        let zero = vec![0.0, 0.0];
        let w1 = vec![0.3, 0.6];
        let (_, _, w) = combine(&zero, &zero, &zero, &zero, &zero, &w1, 0.3);
        assert_eq!(w, vec![1.0, 2.0]);
    }

    #[test]
    fn schedule_rejects_bad_tail_index() {
        for s in [1.0, 0.5, 2.5] {
            assert!(matches!(
                theory_schedule(&constants(s, 1.0), 1, 100),
                Err(ScheduleError::BadTailIndex(_))
            ));
        }
    }

    #[test]
    fn schedule_gamma_exponent_s2() {
        // s = 2: γ scales as T^{-4/5}, so γ(T)/γ(10T) = 10^{4/5}.
        let c = constants(2.0, 1.0);
        let a = theory_schedule(&c, 1, 1_000).unwrap();
        let b = theory_schedule(&c, 1, 10_000).unwrap();
        let ratio = a.gamma_x / b.gamma_x;
        let expected = 10f64.powf(0.8);
        assert!((ratio / expected - 1.0).abs() < 1e-9, "{ratio} vs {expected}");
        assert!(a.gamma_x < 1.0, "gamma must be unclamped for the exponent check");
    }

    #[test]
    fn schedule_eta_ratios() {
        let c = constants(1.7, 2.0);
        let hp = theory_schedule(&c, 4, 500).unwrap();
        let expected_y = hp.eta_x * 4.0 * (hp.delta * c.l_f + c.l_g) / c.mu;
        let expected_z = hp.eta_x * 4.0 * c.l_g / c.mu;
        assert!((hp.eta_y - expected_y).abs() < 1e-15 * expected_y.abs());
        assert!((hp.eta_z - expected_z).abs() < 1e-15 * expected_z.abs());
    }

    #[test]
    fn schedule_gamma_clamps_at_one() {
        // Tiny T with sigma < 1 pushes the raw coefficient above 1.
        let c = TheoryConstants { sigma: 0.1, ..constants(2.0, 1.0) };
        let hp = theory_schedule(&c, 8, 1).unwrap();
        assert_eq!(hp.gamma_x, 1.0);
    }

    #[test]
    fn schedule_delta_decreases_in_t() {
        let c = constants(1.5, 1.0);
        let mut last = f64::INFINITY;
        for t in [10, 100, 1_000, 10_000] {
            let hp = theory_schedule(&c, 2, t).unwrap();
            assert!(hp.delta < last);
            last = hp.delta;
        }
    }

    #[test]
    fn dominant_rate_exponent_is_one_fifth_at_s2() {
        let (_, exponent) = dominant_rate(&constants(2.0, 1.0), 1, 1_000);
        assert!((exponent - 0.2).abs() < 1e-15);
    }

    #[test]
    fn dominant_rate_speedup_in_workers() {
        let c = constants(2.0, 1.0);
        let (one, _) = dominant_rate(&c, 1, 1_000);
        let (two, _) = dominant_rate(&c, 2, 1_000);
        let expected = 2f64.powf(0.2);
        assert!((one / two - expected).abs() < 1e-12);
    }

    #[test]
    fn hyperparams_validation() {
        let good = HyperParams {
            eta_x: 1e-3,
            eta_y: 1e-3,
            eta_z: 1e-3,
            gamma_x: 0.1,
            gamma_y: 0.1,
            gamma_z: 0.1,
            delta: 0.3,
            batch0: 32,
            batch: 32,
            iterations: 10,
            normalized: true,
            variance_reduced: true,
        };
        assert!(good.validate().is_ok());
        assert!(HyperParams { eta_x: 0.0, ..good.clone() }.validate().is_err());
        assert!(HyperParams { gamma_x: 1.5, ..good.clone() }.validate().is_err());
        assert!(HyperParams { delta: -0.1, ..good.clone() }.validate().is_err());
        assert!(HyperParams { batch0: 8, batch: 32, ..good.clone() }.validate().is_err());
        let collapsed = HyperParams { variance_reduced: false, ..good }.resolved();
        assert_eq!(collapsed.gamma_x, 1.0);
        assert_eq!(collapsed.gamma_y, 1.0);
        assert_eq!(collapsed.gamma_z, 1.0);
    }
}
