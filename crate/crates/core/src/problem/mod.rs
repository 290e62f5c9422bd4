//! The bilevel problem interface consumed by the optimizer.
//!
//! An instance owns per-worker data and exposes stochastic and full-batch
//! first-order gradients of the upper-level loss `f` and lower-level loss
//! `g` in both arguments. Stochastic calls are pure given (point, batch
//! ids), so workers can evaluate them in parallel; batches index into the
//! worker's own shard, with the upper-level stream drawing from the
//! validation shard and the lower-level stream from the training shard.

mod mlp;
mod quadratic;

pub use mlp::{Activation, MlpHyperOpt};
pub use quadratic::QuadraticBilevel;

use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub trait BilevelProblem: Send + Sync {
    /// Dimension of the upper-level variable `x`.
    fn dim_x(&self) -> usize;
    /// Dimension of the lower-level variable `y` (and of `z`).
    fn dim_y(&self) -> usize;
    fn workers(&self) -> usize;

    /// Sample count of worker `k`'s upper-level (validation) sampling
    /// domain; `None` means an unbounded population of synthetic draws.
    fn f_domain(&self, worker: usize) -> Option<usize>;
    /// Same for the lower-level (training) domain.
    fn g_domain(&self, worker: usize) -> Option<usize>;

    fn grad1_f(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64>;
    fn grad2_f(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64>;
    fn grad1_g(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64>;
    fn grad2_g(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64>;

    fn full_grad1_f(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn full_grad2_f(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn full_grad1_g(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn full_grad2_g(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// Mean upper-level loss of worker `k` on the given split.
    fn upper_loss(&self, worker: usize, x: &[f64], y: &[f64], split: Split) -> f64;
    /// Classification accuracy in [0,1]; `None` when the instance is not a
    /// classifier (the quadratic oracle).
    fn accuracy(&self, worker: usize, x: &[f64], y: &[f64], split: Split) -> Option<f64>;

    /// Common starting point `(x0, y0)` shared by every worker.
    fn initial_point(&self, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>);

    /// Exact hypergradient where a closed form exists.
    fn exact_hypergradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let _ = x;
        None
    }
}

fn worker_mean(workers: usize, mut per_worker: impl FnMut(usize) -> f64) -> f64 {
    (0..workers).map(&mut per_worker).sum::<f64>() / workers as f64
}

/// Global upper-level loss `(1/K) Σ_k f^{(k)}`.
pub fn global_upper_loss(problem: &dyn BilevelProblem, x: &[f64], y: &[f64], split: Split) -> f64 {
    worker_mean(problem.workers(), |k| problem.upper_loss(k, x, y, split))
}

/// Global accuracy, averaged over workers; `None` for non-classifiers.
pub fn global_accuracy(problem: &dyn BilevelProblem, x: &[f64], y: &[f64], split: Split) -> Option<f64> {
    let mut acc = 0.0;
    for k in 0..problem.workers() {
        acc += problem.accuracy(k, x, y, split)?;
    }
    Some(acc / problem.workers() as f64)
}

/// Global full-batch gradients `(1/K) Σ_k ∇·` at a common point.
pub fn global_full_gradient(
    problem: &dyn BilevelProblem,
    x: &[f64],
    y: &[f64],
    stream: GradientStream,
) -> Vec<f64> {
    let k = problem.workers();
    let dim = match stream {
        GradientStream::F1 | GradientStream::G1 => problem.dim_x(),
        GradientStream::F2 | GradientStream::G2 => problem.dim_y(),
    };
    let mut acc = vec![0.0; dim];
    for w in 0..k {
        let g = match stream {
            GradientStream::F1 => problem.full_grad1_f(w, x, y),
            GradientStream::F2 => problem.full_grad2_f(w, x, y),
            GradientStream::G1 => problem.full_grad1_g(w, x, y),
            GradientStream::G2 => problem.full_grad2_g(w, x, y),
        };
        crate::linalg::axpy(&mut acc, 1.0, &g);
    }
    for a in &mut acc {
        *a /= k as f64;
    }
    acc
}

/// Which of the four gradient maps is meant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientStream {
    /// `∇₁ f`
    F1,
    /// `∇₂ f`
    F2,
    /// `∇₁ g`
    G1,
    /// `∇₂ g`
    G2,
}
