//! Hyperparameter optimization for a regularized two-layer network.
//!
//! The lower level trains the network weights `y = (y₁, y₂)` on each
//! worker's training shard under per-unit exponential weight penalties
//! controlled by the upper-level variable `x = (x₁, x₂)`:
//!
//! ```text
//! R₁(x,y) = (1/d₂) Σ_q exp(x₁,q) · (1/d₁) Σ_p y₁,pq²
//! R₂(x,y) = (1/d₃) Σ_q exp(x₂,q) · (1/d₂) Σ_p y₂,pq²
//! ```
//!
//! The upper level is the unregularized logistic loss on the validation
//! shard, so `∇₁ f ≡ 0`. Scores are `y₂ᵀ · act(y₁ᵀ · features)` with a
//! smooth activation (tanh by default, softplus as the alternative); a
//! score of exactly 0 predicts class +1.

use serde::{Deserialize, Serialize};

use super::{BilevelProblem, Split};
use crate::data::{sgn_plus, Dataset, ShardedDataset};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Softplus => softplus(v),
        }
    }

    #[inline]
    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(v),
        }
    }
}

#[inline]
fn softplus(v: f64) -> f64 {
    // ln(1 + e^v), stable for large |v|.
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub struct MlpHyperOpt {
    shards: ShardedDataset,
    input_dim: usize, // d1
    hidden: usize,    // d2
    activation: Activation,
}

impl MlpHyperOpt {
    pub const DEFAULT_HIDDEN: usize = 20;

    pub fn new(shards: ShardedDataset, hidden: usize, activation: Activation) -> Self {
        assert!(shards.workers() >= 1);
        let input_dim = shards.train[0].dim();
        for ds in shards.train.iter().chain(&shards.validation).chain(&shards.test) {
            assert_eq!(ds.dim(), input_dim, "all shards must share the feature dimension");
        }
        Self { shards, input_dim, hidden, activation }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn shard(&self, worker: usize, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.shards.train[worker],
            Split::Validation => &self.shards.validation[worker],
            Split::Test => &self.shards.test[worker],
        }
    }

    #[inline]
    fn split_y<'a>(&self, y: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        y.split_at(self.input_dim * self.hidden)
    }

    /// Forward pass for one sample: pre-activations and the scalar score.
    fn forward(&self, ds: &Dataset, i: usize, y: &[f64]) -> (Vec<f64>, f64) {
        let h = self.hidden;
        let (y1, y2) = self.split_y(y);
        let mut pre = vec![0.0; h];
        ds.for_each_feature(i, |p, v| {
            crate::linalg::axpy(&mut pre, v, &y1[p * h..(p + 1) * h]);
        });
        let mut score = 0.0;
        for q in 0..h {
            score += self.activation.apply(pre[q]) * y2[q];
        }
        (pre, score)
    }

    /// Accumulates the per-sample logistic-loss gradient with respect to y.
    fn accumulate_loss_grad(&self, ds: &Dataset, i: usize, y: &[f64], out: &mut [f64]) {
        let h = self.hidden;
        let (_, y2) = self.split_y(y);
        let (pre, score) = self.forward(ds, i, y);
        let label = ds.label(i);
        let dscore = -label * sigmoid(-label * score);
        let (out1, out2) = out.split_at_mut(self.input_dim * h);
        let mut dpre = vec![0.0; h];
        for q in 0..h {
            out2[q] += self.activation.apply(pre[q]) * dscore;
            dpre[q] = y2[q] * dscore * self.activation.derivative(pre[q]);
        }
        ds.for_each_feature(i, |p, v| {
            crate::linalg::axpy(&mut out1[p * h..(p + 1) * h], v, &dpre);
        });
    }

    /// Mean logistic-loss gradient w.r.t. y over the given rows.
    fn loss_grad_y(&self, ds: &Dataset, rows: &[u64], y: &[f64]) -> Vec<f64> {
        assert!(!rows.is_empty(), "empty batch");
        let mut out = vec![0.0; self.dim_y()];
        for &i in rows {
            self.accumulate_loss_grad(ds, i as usize, y, &mut out);
        }
        let inv = 1.0 / rows.len() as f64;
        for o in &mut out {
            *o *= inv;
        }
        out
    }

    /// ∂(R₁+R₂)/∂x.
    fn reg_grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let d1 = self.input_dim;
        let (y1, y2) = self.split_y(y);
        let mut out = vec![0.0; self.dim_x()];
        for q in 0..h {
            let mut sq = 0.0;
            for p in 0..d1 {
                sq += y1[p * h + q] * y1[p * h + q];
            }
            out[q] = x[q].exp() * sq / (d1 as f64 * h as f64);
        }
        let mut sq = 0.0;
        for q in 0..h {
            sq += y2[q] * y2[q];
        }
        out[h] = x[h].exp() * sq / h as f64;
        out
    }

    /// ∂(R₁+R₂)/∂y.
    fn reg_grad_y(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let d1 = self.input_dim;
        let (y1, y2) = self.split_y(y);
        let mut out = vec![0.0; self.dim_y()];
        let (out1, out2) = out.split_at_mut(d1 * h);
        for q in 0..h {
            let coef = 2.0 * x[q].exp() / (d1 as f64 * h as f64);
            for p in 0..d1 {
                out1[p * h + q] = coef * y1[p * h + q];
            }
        }
        let coef2 = 2.0 * x[h].exp() / h as f64;
        for q in 0..h {
            out2[q] = coef2 * y2[q];
        }
        out
    }

    /// Value of R₁ + R₂ (used by the lower-level loss).
    pub fn regularizer_value(&self, x: &[f64], y: &[f64]) -> f64 {
        let h = self.hidden;
        let d1 = self.input_dim;
        let (y1, y2) = self.split_y(y);
        let mut r1 = 0.0;
        for q in 0..h {
            let mut sq = 0.0;
            for p in 0..d1 {
                sq += y1[p * h + q] * y1[p * h + q];
            }
            r1 += x[q].exp() * sq / d1 as f64;
        }
        r1 /= h as f64;
        let mut sq = 0.0;
        for q in 0..h {
            sq += y2[q] * y2[q];
        }
        let r2 = x[h].exp() * sq / h as f64;
        r1 + r2
    }

    fn mean_loss(&self, ds: &Dataset, y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..ds.len() {
            let (_, score) = self.forward(ds, i, y);
            acc += softplus(-ds.label(i) * score);
        }
        acc / ds.len() as f64
    }

    /// Mean lower-level loss of one worker: training logistic loss plus the
    /// regularizers.
    pub fn lower_loss(&self, worker: usize, x: &[f64], y: &[f64]) -> f64 {
        self.mean_loss(self.shard(worker, Split::Train), y) + self.regularizer_value(x, y)
    }

    fn all_rows(ds: &Dataset) -> Vec<u64> {
        (0..ds.len() as u64).collect()
    }
}

impl BilevelProblem for MlpHyperOpt {
    fn dim_x(&self) -> usize {
        self.hidden + 1
    }

    fn dim_y(&self) -> usize {
        self.input_dim * self.hidden + self.hidden
    }

    fn workers(&self) -> usize {
        self.shards.workers()
    }

    fn f_domain(&self, worker: usize) -> Option<usize> {
        Some(self.shards.validation[worker].len())
    }

    fn g_domain(&self, worker: usize) -> Option<usize> {
        Some(self.shards.train[worker].len())
    }

    fn grad1_f(&self, _worker: usize, _x: &[f64], _y: &[f64], _batch: &[u64]) -> Vec<f64> {
        // The upper level has no x dependence.
        vec![0.0; self.dim_x()]
    }

    fn grad2_f(&self, worker: usize, _x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64> {
        self.loss_grad_y(self.shard(worker, Split::Validation), batch, y)
    }

    fn grad1_g(&self, _worker: usize, x: &[f64], y: &[f64], _batch: &[u64]) -> Vec<f64> {
        // Only the regularizers depend on x, and they are sample-free.
        self.reg_grad_x(x, y)
    }

    fn grad2_g(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64> {
        let mut out = self.loss_grad_y(self.shard(worker, Split::Train), batch, y);
        crate::linalg::axpy(&mut out, 1.0, &self.reg_grad_y(x, y));
        out
    }

    fn full_grad1_f(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad1_f(worker, x, y, &[])
    }

    fn full_grad2_f(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad2_f(worker, x, y, &Self::all_rows(self.shard(worker, Split::Validation)))
    }

    fn full_grad1_g(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad1_g(worker, x, y, &[])
    }

    fn full_grad2_g(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad2_g(worker, x, y, &Self::all_rows(self.shard(worker, Split::Train)))
    }

    fn upper_loss(&self, worker: usize, _x: &[f64], y: &[f64], split: Split) -> f64 {
        self.mean_loss(self.shard(worker, split), y)
    }

    fn accuracy(&self, worker: usize, _x: &[f64], y: &[f64], split: Split) -> Option<f64> {
        let ds = self.shard(worker, split);
        let mut correct = 0usize;
        for i in 0..ds.len() {
            let (_, score) = self.forward(ds, i, y);
            if sgn_plus(score) == ds.label(i) {
                correct += 1;
            }
        }
        Some(correct as f64 / ds.len() as f64)
    }

    fn initial_point(&self, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        // x = 0 gives exp(0) = 1, unit regularization weight; y uniform on
        // ±1/sqrt(fan_in) per layer.
        let x = vec![0.0; self.dim_x()];
        let h = self.hidden;
        let bound1 = 1.0 / (self.input_dim as f64).sqrt();
        let bound2 = 1.0 / (h as f64).sqrt();
        let mut y = Vec::with_capacity(self.dim_y());
        for _ in 0..self.input_dim * h {
            y.push((rng.open01() * 2.0 - 1.0) * bound1);
        }
        for _ in 0..h {
            y.push((rng.open01() * 2.0 - 1.0) * bound2);
        }
        (x, y)
    }
}
