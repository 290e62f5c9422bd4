//! Small dense-vector helpers shared across the crate.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "vector dimension mismatch");
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `out += coef * v`
pub fn axpy(out: &mut [f64], coef: f64, v: &[f64]) {
    assert_eq!(out.len(), v.len(), "vector dimension mismatch");
    for (o, x) in out.iter_mut().zip(v) {
        *o += coef * x;
    }
}

/// Arithmetic mean of a nonempty list of equal-length vectors.
pub fn mean_vector<V: AsRef<[f64]>>(vectors: &[V]) -> Vec<f64> {
    assert!(!vectors.is_empty(), "mean of empty vector list");
    let dim = vectors[0].as_ref().len();
    let mut out = vec![0.0; dim];
    for v in vectors {
        axpy(&mut out, 1.0, v.as_ref());
    }
    let inv = 1.0 / vectors.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    out
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two() {
        let m = mean_vector(&[vec![1.0, 3.0], vec![3.0, 5.0]]);
        assert_eq!(m, vec![2.0, 4.0]);
    }

    #[test]
    fn norm_345() {
        assert_eq!(norm(&[3.0, 4.0]), 5.0);
    }
}
