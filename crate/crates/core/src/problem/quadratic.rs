//! Closed-form quadratic bilevel instance used as a verification oracle.
//!
//! Worker `k` holds `f_k(x,y) = ½‖x−a_k‖² + ½‖y−b_k‖²` and
//! `g_k(x,y) = ½‖y − C_k x − e_k‖²`. The global lower-level problem is
//! strongly convex in `y` with minimizer `y*(x) = C̄x + ē`, so the
//! hypergradient has the closed form `∇Φ(x) = (x−ā) + C̄ᵀ(C̄x + ē − b̄)`.
//!
//! Stochastic gradients are the exact gradients plus optional additive
//! noise. A "sample" is a 64-bit id; the noise attached to an id is a pure
//! function of (problem seed, id, stream), so re-evaluating a batch at two
//! points reuses the same realization — exactly what the recursive
//! estimators require — and evaluation stays pure and thread-safe.

use rand_distr::Distribution;

use super::{BilevelProblem, Split};
use crate::linalg::{axpy, dot};
use crate::noise::{sample, NoiseSpec};
use crate::rng::{domain, StreamRng};

const STREAM_F1: u64 = 1;
const STREAM_F2: u64 = 2;
const STREAM_G1: u64 = 3;
const STREAM_G2: u64 = 4;

#[derive(Clone, Debug)]
pub struct QuadraticBilevel {
    dim_x: usize,
    dim_y: usize,
    targets_x: Vec<Vec<f64>>, // a_k
    targets_y: Vec<Vec<f64>>, // b_k
    maps: Vec<Vec<f64>>,      // C_k, row-major dim_y x dim_x
    offsets: Vec<Vec<f64>>,   // e_k
    noise: NoiseSpec,
    noise_seed: u64,
    start: (Vec<f64>, Vec<f64>),
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    mean_map: Vec<f64>,
    mean_offset: Vec<f64>,
}

impl QuadraticBilevel {
    pub fn new(
        dim_x: usize,
        dim_y: usize,
        targets_x: Vec<Vec<f64>>,
        targets_y: Vec<Vec<f64>>,
        maps: Vec<Vec<f64>>,
        offsets: Vec<Vec<f64>>,
        noise: NoiseSpec,
        noise_seed: u64,
        start: (Vec<f64>, Vec<f64>),
    ) -> Self {
        let workers = targets_x.len();
        assert!(workers >= 1);
        assert!(targets_y.len() == workers && maps.len() == workers && offsets.len() == workers);
        for k in 0..workers {
            assert_eq!(targets_x[k].len(), dim_x);
            assert_eq!(targets_y[k].len(), dim_y);
            assert_eq!(maps[k].len(), dim_y * dim_x);
            assert_eq!(offsets[k].len(), dim_y);
        }
        assert_eq!(start.0.len(), dim_x);
        assert_eq!(start.1.len(), dim_y);
        let mean_a = crate::linalg::mean_vector(&targets_x);
        let mean_b = crate::linalg::mean_vector(&targets_y);
        let mean_map = crate::linalg::mean_vector(&maps);
        let mean_offset = crate::linalg::mean_vector(&offsets);
        Self {
            dim_x,
            dim_y,
            targets_x,
            targets_y,
            maps,
            offsets,
            noise,
            noise_seed,
            start,
            mean_a,
            mean_b,
            mean_map,
            mean_offset,
        }
    }

    /// Random instance with targets of the given spread around the origin
    /// and map entries scaled by `coupling / sqrt(dim_x)`.
    pub fn random(
        dim_x: usize,
        dim_y: usize,
        workers: usize,
        spread: f64,
        coupling: f64,
        seed: u64,
        noise: NoiseSpec,
    ) -> Self {
        let mut rng = StreamRng::from_path(seed, &[domain::DATASET, 10]);
        let gauss = |scale: f64, n: usize, rng: &mut StreamRng| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let v: f64 = rand_distr::StandardNormal.sample(rng);
                    scale * v
                })
                .collect()
        };
        let mut targets_x = Vec::new();
        let mut targets_y = Vec::new();
        let mut maps = Vec::new();
        let mut offsets = Vec::new();
        for _ in 0..workers {
            targets_x.push(gauss(spread, dim_x, &mut rng));
            targets_y.push(gauss(spread, dim_y, &mut rng));
            maps.push(gauss(coupling / (dim_x as f64).sqrt(), dim_y * dim_x, &mut rng));
            offsets.push(gauss(spread, dim_y, &mut rng));
        }
        let start = (vec![0.0; dim_x], vec![0.0; dim_y]);
        Self::new(dim_x, dim_y, targets_x, targets_y, maps, offsets, noise, seed, start)
    }

    fn map_apply(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let c = &self.maps[k];
        (0..self.dim_y).map(|r| dot(&c[r * self.dim_x..(r + 1) * self.dim_x], x)).collect()
    }

    fn mean_map_apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim_y)
            .map(|r| dot(&self.mean_map[r * self.dim_x..(r + 1) * self.dim_x], x))
            .collect()
    }

    fn mean_map_transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_x];
        for r in 0..self.dim_y {
            axpy(&mut out, v[r], &self.mean_map[r * self.dim_x..(r + 1) * self.dim_x]);
        }
        out
    }

    /// Residual `y − C_k x − e_k` of worker k's lower-level map.
    fn residual(&self, k: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let cx = self.map_apply(k, x);
        (0..self.dim_y).map(|r| y[r] - cx[r] - self.offsets[k][r]).collect()
    }

    /// Lower-level minimizer of the global problem, `y*(x) = C̄x + ē`.
    pub fn y_star(&self, x: &[f64]) -> Vec<f64> {
        let cx = self.mean_map_apply(x);
        (0..self.dim_y).map(|r| cx[r] + self.mean_offset[r]).collect()
    }

    /// Global upper-level value at the lower-level optimum, `Φ(x)`.
    pub fn phi(&self, x: &[f64]) -> f64 {
        let y = self.y_star(x);
        (0..self.workers()).map(|k| self.upper_value(k, x, &y)).sum::<f64>() / self.workers() as f64
    }

    fn upper_value(&self, k: usize, x: &[f64], y: &[f64]) -> f64 {
        let dx: f64 = x.iter().zip(&self.targets_x[k]).map(|(v, a)| (v - a) * (v - a)).sum();
        let dy: f64 = y.iter().zip(&self.targets_y[k]).map(|(v, b)| (v - b) * (v - b)).sum();
        0.5 * (dx + dy)
    }

    fn with_noise(&self, exact: Vec<f64>, stream: u64, batch: &[u64]) -> Vec<f64> {
        if self.noise.is_none() || batch.is_empty() {
            return exact;
        }
        let mut out = exact;
        let weight = 1.0 / batch.len() as f64;
        for &id in batch {
            let mut rng = StreamRng::from_path(self.noise_seed, &[domain::GRAD_NOISE, id, stream]);
            for o in out.iter_mut() {
                *o += weight * sample(&self.noise, &mut rng);
            }
        }
        out
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn dim_x(&self) -> usize {
        self.dim_x
    }

    fn dim_y(&self) -> usize {
        self.dim_y
    }

    fn workers(&self) -> usize {
        self.targets_x.len()
    }

    fn f_domain(&self, _worker: usize) -> Option<usize> {
        None
    }

    fn g_domain(&self, _worker: usize) -> Option<usize> {
        None
    }

    fn grad1_f(&self, worker: usize, x: &[f64], _y: &[f64], batch: &[u64]) -> Vec<f64> {
        self.with_noise(crate::linalg::sub(x, &self.targets_x[worker]), STREAM_F1, batch)
    }

    fn grad2_f(&self, worker: usize, _x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64> {
        self.with_noise(crate::linalg::sub(y, &self.targets_y[worker]), STREAM_F2, batch)
    }

    fn grad1_g(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64> {
        let r = self.residual(worker, x, y);
        let mut out = vec![0.0; self.dim_x];
        let c = &self.maps[worker];
        for row in 0..self.dim_y {
            axpy(&mut out, -r[row], &c[row * self.dim_x..(row + 1) * self.dim_x]);
        }
        self.with_noise(out, STREAM_G1, batch)
    }

    fn grad2_g(&self, worker: usize, x: &[f64], y: &[f64], batch: &[u64]) -> Vec<f64> {
        self.with_noise(self.residual(worker, x, y), STREAM_G2, batch)
    }

    fn full_grad1_f(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad1_f(worker, x, y, &[])
    }

    fn full_grad2_f(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad2_f(worker, x, y, &[])
    }

    fn full_grad1_g(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad1_g(worker, x, y, &[])
    }

    fn full_grad2_g(&self, worker: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.grad2_g(worker, x, y, &[])
    }

    fn upper_loss(&self, worker: usize, x: &[f64], y: &[f64], _split: Split) -> f64 {
        self.upper_value(worker, x, y)
    }

    fn accuracy(&self, _worker: usize, _x: &[f64], _y: &[f64], _split: Split) -> Option<f64> {
        None
    }

    fn initial_point(&self, _rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
        self.start.clone()
    }

    fn exact_hypergradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        // ∇Φ(x) = (x − ā) + C̄ᵀ(C̄x + ē − b̄)
        let y = self.y_star(x);
        let inner: Vec<f64> = (0..self.dim_y).map(|r| y[r] - self.mean_b[r]).collect();
        let mut out = self.mean_map_transpose_apply(&inner);
        for i in 0..self.dim_x {
            out[i] += x[i] - self.mean_a[i];
        }
        Some(out)
    }
}
