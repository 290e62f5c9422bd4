//! Counter-based random number generation with explicit stream splitting.
//!
//! Every random draw in a run is addressed by a path of 64-bit components
//! (domain tag, worker id, iteration, ...). Deriving a generator from the
//! same seed and path always yields the same bit stream, no matter which
//! thread asks first, so worker-parallel and sequential execution produce
//! identical results.
//!
//! The generator itself is the SplitMix64 finalizer applied to
//! `key + (counter+1) * GOLDEN`; keys are derived by folding path components
//! through the same mixer.

use rand::RngCore;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const KEY_SALT: u64 = 0x243f_6a88_85a3_08d3;
const PATH_SALT: u64 = 0xb7e1_5162_8aed_2a6b;

/// Stream domains used by the optimizer and data generators. Collected in
/// one place so the single-machine replay can follow the same convention.
pub mod domain {
    /// Fresh upper-level sample batch (xi) for worker `k` at iteration `t`.
    pub const BATCH_XI: u64 = 1;
    /// Lower-level batch (zeta) used at the `(x, y)` evaluation points.
    pub const BATCH_ZETA: u64 = 2;
    /// Independent lower-level batch for the `(x, z)` evaluation points.
    pub const BATCH_ZETA2: u64 = 3;
    /// Initial point draw for a run.
    pub const INIT: u64 = 4;
    /// Per-sample gradient noise of the quadratic oracle problem.
    pub const GRAD_NOISE: u64 = 5;
    /// Dataset generation.
    pub const DATASET: u64 = 6;
    /// Derivation of per-run seeds from a master seed.
    pub const SEED_SEQUENCE: u64 = 7;
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn derive(key: u64, component: u64) -> u64 {
    mix64(key.wrapping_add(GOLDEN) ^ mix64(component ^ PATH_SALT))
}

/// Splittable counter-based generator. `Clone` gives an identical stream.
#[derive(Clone, Debug)]
pub struct StreamRng {
    key: u64,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed ^ KEY_SALT), counter: 0 }
    }

    /// Generator for `seed` refined by each path component in turn.
    /// `from_path(s, &[a, b])` equals `from_path(s, &[a]).substream(b)`.
    pub fn from_path(seed: u64, path: &[u64]) -> Self {
        let mut key = mix64(seed ^ KEY_SALT);
        for &component in path {
            key = derive(key, component);
        }
        Self { key, counter: 0 }
    }

    /// Independent child stream; does not disturb `self`.
    pub fn substream(&self, tag: u64) -> Self {
        Self { key: derive(self.key, tag), counter: 0 }
    }

    #[inline]
    fn next(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw on the open interval (0, 1).
    #[inline]
    pub fn open01(&mut self) -> f64 {
        // 52 mantissa bits, offset by half an ulp: never exactly 0 or 1.
        ((self.next() >> 12) as f64 + 0.5) * (1.0 / 4_503_599_627_370_496.0)
    }
}

impl RngCore for StreamRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let word = self.next().to_le_bytes();
            chunk.copy_from_slice(&word[..chunk.len()]);
        }
    }
}

/// The batch-drawing convention shared by the optimizer and the
/// single-machine replay: batch ids for (domain, worker, iteration) come
/// from the path `[domain_tag, worker, iteration]` under the run seed.
/// Finite populations are sampled without replacement; an unbounded
/// population yields raw 64-bit sample ids.
pub fn draw_batch(
    seed: u64,
    domain_tag: u64,
    worker: u64,
    iteration: u64,
    population: Option<usize>,
    count: usize,
) -> Vec<u64> {
    let mut rng = StreamRng::from_path(seed, &[domain_tag, worker, iteration]);
    match population {
        Some(n) => sample_distinct(&mut rng, n, count),
        None => (0..count).map(|_| rng.next_u64()).collect(),
    }
}

/// Draws `count` distinct indices from `0..n` (partial Fisher-Yates).
/// Order of the result depends on the rng stream only.
pub fn sample_distinct(rng: &mut StreamRng, n: usize, count: usize) -> Vec<u64> {
    assert!(count <= n, "cannot draw {count} distinct indices from 0..{n}");
    use rand::Rng;
    let mut pool: Vec<u64> = (0..n as u64).collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
        out.push(pool[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_stream() {
        let mut a = StreamRng::from_path(7, &[1, 2, 3]);
        let mut b = StreamRng::from_path(7, &[1, 2, 3]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substream_matches_extended_path() {
        let mut a = StreamRng::from_path(9, &[4]).substream(5);
        let mut b = StreamRng::from_path(9, &[4, 5]);
        for _ in 0..10 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn paths_do_not_collide_trivially() {
        let mut seen = std::collections::HashSet::new();
        for a in 0..8u64 {
            for b in 0..8u64 {
                let mut r = StreamRng::from_path(0, &[a, b]);
                assert!(seen.insert(r.next_u64()), "collision at path [{a}, {b}]");
            }
        }
    }

    #[test]
    fn open01_is_open() {
        let mut r = StreamRng::new(3);
        for _ in 0..10_000 {
            let u = r.open01();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut r = StreamRng::new(11);
        let picks = sample_distinct(&mut r, 50, 20);
        let set: std::collections::HashSet<_> = picks.iter().collect();
        assert_eq!(set.len(), 20);
        assert!(picks.iter().all(|&i| i < 50));
    }
}
