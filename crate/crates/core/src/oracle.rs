//! Independent verification machinery: a single-machine replay of the
//! optimizer, central-difference gradients, and a brute-force symmetric
//! eigensolver. Each is written without the production abstractions it
//! checks, so a shared bug cannot hide in common code.

use thiserror::Error;

use crate::optim::HyperParams;
use crate::problem::BilevelProblem;
use crate::rng::{domain, draw_batch, StreamRng};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("brute-force eigensolve is limited to 8x8 matrices, got {0}x{0}")]
    TooLarge(usize),
    #[error("matrix is not symmetric at ({0},{1})")]
    NotSymmetric(usize, usize),
}

/// Central finite differences `(f(p+h·e_i) − f(p−h·e_i)) / 2h`.
pub fn finite_difference<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0);
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// All eigenvalues of a small symmetric matrix (row-major, `k ≤ 8`),
/// sorted by magnitude descending. Householder tridiagonalization followed
/// by bisection on the Sturm sequence of the characteristic polynomial;
/// independent of the production eigensolver.
pub fn brute_eigen(matrix: &[f64], k: usize) -> Result<Vec<f64>, OracleError> {
    if k == 0 || k > 8 {
        return Err(OracleError::TooLarge(k));
    }
    assert_eq!(matrix.len(), k * k, "matrix shape mismatch");
    for i in 0..k {
        for j in (i + 1)..k {
            if (matrix[i * k + j] - matrix[j * k + i]).abs() > 1e-12 {
                return Err(OracleError::NotSymmetric(i, j));
            }
        }
    }
    let (diag, off) = tridiagonalize(matrix, k);

    // Gershgorin interval containing every eigenvalue.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let mut radius = 0.0;
        if i > 0 {
            radius += off[i - 1].abs();
        }
        if i + 1 < k {
            radius += off[i].abs();
        }
        lo = lo.min(diag[i] - radius);
        hi = hi.max(diag[i] + radius);
    }
    lo -= 1e-9;
    hi += 1e-9;

    let mut eigenvalues = Vec::with_capacity(k);
    for m in 0..k {
        // m-th smallest eigenvalue: bisect on the count of eigenvalues
        // below the midpoint.
        let (mut a, mut b) = (lo, hi);
        for _ in 0..120 {
            let mid = 0.5 * (a + b);
            if sturm_count_below(&diag, &off, mid) > m {
                b = mid;
            } else {
                a = mid;
            }
        }
        eigenvalues.push(0.5 * (a + b));
    }
    eigenvalues.sort_by(|x, y| y.abs().partial_cmp(&x.abs()).unwrap());
    Ok(eigenvalues)
}

/// Householder reduction of a symmetric matrix to tridiagonal form,
/// returning (diagonal, off-diagonal).
fn tridiagonalize(matrix: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let at = |a: &[f64], i: usize, j: usize| a[i * k + j];
    for col in 0..k.saturating_sub(2) {
        let norm_x: f64 = (col + 1..k).map(|i| at(&a, i, col).powi(2)).sum::<f64>().sqrt();
        if norm_x < 1e-300 {
            continue;
        }
        let alpha = if at(&a, col + 1, col) >= 0.0 { -norm_x } else { norm_x };
        let mut v = vec![0.0; k];
        for i in col + 1..k {
            v[i] = at(&a, i, col);
        }
        v[col + 1] -= alpha;
        let v_norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v_norm < 1e-300 {
            continue;
        }
        for x in &mut v {
            *x /= v_norm;
        }
        // A <- H A H with H = I - 2 v vᵀ.
        let mut av = vec![0.0; k];
        for i in 0..k {
            av[i] = (0..k).map(|j| at(&a, i, j) * v[j]).sum();
        }
        let vav: f64 = (0..k).map(|i| v[i] * av[i]).sum();
        for i in 0..k {
            for j in 0..k {
                a[i * k + j] += -2.0 * v[i] * av[j] - 2.0 * av[i] * v[j] + 4.0 * vav * v[i] * v[j];
            }
        }
    }
    let diag: Vec<f64> = (0..k).map(|i| at(&a, i, i)).collect();
    let off: Vec<f64> = (0..k.saturating_sub(1)).map(|i| at(&a, i + 1, i)).collect();
    (diag, off)
}

/// Number of eigenvalues of the tridiagonal matrix strictly below `x`,
/// from the sign changes of the Sturm sequence of leading principal
/// minors of `T − xI`.
fn sturm_count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0usize;
    let mut d = 1.0f64;
    for i in 0..diag.len() {
        let off_sq = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        d = diag[i] - x - off_sq / d;
        if d == 0.0 {
            d = -1e-300;
        }
        if d < 0.0 {
            count += 1;
        }
        if d.abs() < 1e-300 {
            d = d.signum() * 1e-300;
        }
    }
    count
}

/// One iteration snapshot of the single-machine replay.
#[derive(Clone, Debug)]
pub struct ReplaySnapshot {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub u3: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub w1: Vec<f64>,
    pub cu: Vec<f64>,
    pub cv: Vec<f64>,
    pub cw: Vec<f64>,
}

/// Straight-line single-machine degeneration of the algorithm: no graph,
/// no tracker machinery (all mixing steps are identities, so the trackers
/// coincide with the combined estimators), recursions written out longhand.
/// Consumes the same random substream convention as worker 0. Returns one
/// snapshot per iteration, taken after the variable update.
pub fn single_machine_replay(
    problem: &dyn BilevelProblem,
    hp: &HyperParams,
    iterations: usize,
    seed: u64,
    shared_zeta: bool,
) -> Vec<ReplaySnapshot> {
    assert_eq!(problem.workers(), 1, "the replay covers the single-worker case");
    let hp = hp.resolved();
    let mut rng = StreamRng::from_path(seed, &[domain::INIT]);
    let (mut x, mut y) = problem.initial_point(&mut rng);
    let mut z = y.clone();
    let mut prev_x = x.clone();
    let mut prev_y = y.clone();
    let mut prev_z = z.clone();
    let dx = problem.dim_x();
    let dy = problem.dim_y();
    let mut u1 = vec![0.0; dx];
    let mut u2 = vec![0.0; dx];
    let mut u3 = vec![0.0; dx];
    let mut v1 = vec![0.0; dy];
    let mut v2 = vec![0.0; dy];
    let mut w1 = vec![0.0; dy];
    let mut trajectory = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let count = if t == 0 { hp.batch0 } else { hp.batch };
        let xi = draw_batch(seed, domain::BATCH_XI, 0, t as u64, problem.f_domain(0), count);
        let zeta = draw_batch(seed, domain::BATCH_ZETA, 0, t as u64, problem.g_domain(0), count);
        let zeta2 = if shared_zeta {
            zeta.clone()
        } else {
            draw_batch(seed, domain::BATCH_ZETA2, 0, t as u64, problem.g_domain(0), count)
        };

        let g1f = problem.grad1_f(0, &x, &y, &xi);
        let g2f = problem.grad2_f(0, &x, &y, &xi);
        let g1gy = problem.grad1_g(0, &x, &y, &zeta);
        let g2gy = problem.grad2_g(0, &x, &y, &zeta);
        let g1gz = problem.grad1_g(0, &x, &z, &zeta2);
        let g2gz = problem.grad2_g(0, &x, &z, &zeta2);

        if t == 0 {
            u1 = g1f;
            u2 = g1gy;
            u3 = g1gz;
            v1 = g2f;
            v2 = g2gy;
            w1 = g2gz;
        } else {
            let p1f = problem.grad1_f(0, &prev_x, &prev_y, &xi);
            let p2f = problem.grad2_f(0, &prev_x, &prev_y, &xi);
            let p1gy = problem.grad1_g(0, &prev_x, &prev_y, &zeta);
            let p2gy = problem.grad2_g(0, &prev_x, &prev_y, &zeta);
            let p1gz = problem.grad1_g(0, &prev_x, &prev_z, &zeta2);
            let p2gz = problem.grad2_g(0, &prev_x, &prev_z, &zeta2);
            for i in 0..dx {
                u1[i] = (1.0 - hp.gamma_x) * (u1[i] - p1f[i]) + g1f[i];
                u2[i] = (1.0 - hp.gamma_x) * (u2[i] - p1gy[i]) + g1gy[i];
                u3[i] = (1.0 - hp.gamma_x) * (u3[i] - p1gz[i]) + g1gz[i];
            }
            for i in 0..dy {
                v1[i] = (1.0 - hp.gamma_y) * (v1[i] - p2f[i]) + g2f[i];
                v2[i] = (1.0 - hp.gamma_y) * (v2[i] - p2gy[i]) + g2gy[i];
                w1[i] = (1.0 - hp.gamma_z) * (w1[i] - p2gz[i]) + g2gz[i];
            }
        }

        let cu: Vec<f64> = (0..dx).map(|i| u1[i] + (u2[i] - u3[i]) / hp.delta).collect();
        let cv: Vec<f64> = (0..dy).map(|i| v1[i] + v2[i] / hp.delta).collect();
        let cw: Vec<f64> = (0..dy).map(|i| w1[i] / hp.delta).collect();

        prev_x = x.clone();
        prev_y = y.clone();
        prev_z = z.clone();
        step(&mut x, &cu, hp.eta_x, hp.normalized);
        step(&mut y, &cv, hp.eta_y, hp.normalized);
        step(&mut z, &cw, hp.eta_z, hp.normalized);

        trajectory.push(ReplaySnapshot {
            x: x.clone(),
            y: y.clone(),
            z: z.clone(),
            u1: u1.clone(),
            u2: u2.clone(),
            u3: u3.clone(),
            v1: v1.clone(),
            v2: v2.clone(),
            w1: w1.clone(),
            cu,
            cv,
            cw,
        });
    }
    trajectory
}

fn step(var: &mut [f64], direction: &[f64], eta: f64, normalized: bool) {
    if normalized {
        let n: f64 = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if n > crate::optim::EPS_NORM {
            for (v, d) in var.iter_mut().zip(direction) {
                *v -= eta * d / n;
            }
        }
    } else {
        for (v, d) in var.iter_mut().zip(direction) {
            *v -= eta * d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSpec;
    use crate::problem::QuadraticBilevel;

    #[test]
    fn finite_difference_on_quadratic_is_exact() {
        // f(x) = ½‖x‖²: central differences are exact up to rounding.
        let p = vec![1.5, -2.0, 0.25];
        let grad = finite_difference(|v| 0.5 * v.iter().map(|x| x * x).sum::<f64>(), &p, 1e-5);
        for (g, x) in grad.iter().zip(&p) {
            assert!((g - x).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_of_constant_is_zero() {
        let grad = finite_difference(|_| 42.0, &[1.0, 2.0], 1e-6);
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn brute_eigen_identity() {
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let eigs = brute_eigen(&eye, 3).unwrap();
        for e in eigs {
            assert!((e - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn brute_eigen_half_matrix() {
        // [[1/2,1/2],[1/2,1/2]] has eigenvalues {1, 0}.
        let m = [0.5, 0.5, 0.5, 0.5];
        let eigs = brute_eigen(&m, 2).unwrap();
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!(eigs[1].abs() < 1e-10);
    }

    #[test]
    fn brute_eigen_line_three_metropolis() {
        let third = 1.0 / 3.0;
        #[rustfmt::skip]
        let m = [
            2.0 * third, third, 0.0,
            third, third, third,
            0.0, third, 2.0 * third,
        ];
        let eigs = brute_eigen(&m, 3).unwrap();
        assert!((eigs[0] - 1.0).abs() < 1e-10);
        assert!((eigs[1] - 2.0 * third).abs() < 1e-10);
        assert!(eigs[2].abs() < 1e-10);
    }

    #[test]
    fn brute_eigen_random_symmetric_matches_trace() {
        let mut rng = StreamRng::new(31);
        for k in 2..=8usize {
            let mut m = vec![0.0; k * k];
            for i in 0..k {
                for j in 0..=i {
                    let v = rng.open01() * 2.0 - 1.0;
                    m[i * k + j] = v;
                    m[j * k + i] = v;
                }
            }
            let eigs = brute_eigen(&m, k).unwrap();
            let trace: f64 = (0..k).map(|i| m[i * k + i]).sum();
            let sum: f64 = eigs.iter().sum();
            assert!((trace - sum).abs() < 1e-8, "k={k}: trace {trace} vs eigensum {sum}");
            // Frobenius norm equals the eigenvalue 2-norm.
            let frob: f64 = m.iter().map(|v| v * v).sum::<f64>();
            let eig_sq: f64 = eigs.iter().map(|v| v * v).sum();
            assert!((frob - eig_sq).abs() < 1e-8);
        }
    }

    #[test]
    fn brute_eigen_rejects_large_and_asymmetric() {
        assert!(matches!(brute_eigen(&[0.0; 81], 9), Err(OracleError::TooLarge(9))));
        assert!(matches!(brute_eigen(&[1.0, 2.0, 3.0, 4.0], 2), Err(OracleError::NotSymmetric(0, 1))));
    }

    #[test]
    fn replay_two_step_scalar_trace_by_hand() {
        // One worker, one dimension: f = ½(x−1)² + ½y², g = ½(y−x/2)²,
        // δ=1, all η=0.1, γ=1, unnormalized, start at the origin.
        //
        // t=0 at (0,0,0): u = ∇₁f = −1, v = ∇₂f + ∇₂g = 0, w = 0,
        //   so (x,y,z) -> (0.1, 0, 0).
        // t=1 at (0.1,0,0): ∇₁f = −0.9; the g-terms in u cancel (y=z);
        //   v = 0 + (0 − 0.05) = −0.05; w = −0.05;
        //   so x -> 0.1 + 0.09 = 0.19, y and z -> 0.005.
        let problem = QuadraticBilevel::new(
            1,
            1,
            vec![vec![1.0]],
            vec![vec![0.0]],
            vec![vec![0.5]],
            vec![vec![0.0]],
            NoiseSpec::None,
            0,
            (vec![0.0], vec![0.0]),
        );
        let hp = HyperParams {
            eta_x: 0.1,
            eta_y: 0.1,
            eta_z: 0.1,
            gamma_x: 1.0,
            gamma_y: 1.0,
            gamma_z: 1.0,
            delta: 1.0,
            batch0: 1,
            batch: 1,
            iterations: 2,
            normalized: false,
            variance_reduced: true,
        };
        let trace = single_machine_replay(&problem, &hp, 2, 3, false);
        assert!((trace[0].x[0] - 0.1).abs() < 1e-15);
        assert!(trace[0].y[0].abs() < 1e-15);
        assert!(trace[0].z[0].abs() < 1e-15);
        assert!((trace[1].x[0] - 0.19).abs() < 1e-12);
        assert!((trace[1].y[0] - 0.005).abs() < 1e-12);
        assert!((trace[1].z[0] - 0.005).abs() < 1e-12);
    }
}
