//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`Stream`]: ChaCha8 keyed by a
//! 64-bit seed plus a 64-bit stream id. ChaCha is counter based, so a
//! `(seed, stream)` pair reproduces the same sequence on every platform.
//! Gaussians use the Box-Muller transform; uniforms take the top 53 bits of
//! each `u64`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Stream keyed by a seed and a path of labels, e.g. `(seed, [m, draw])`.
    pub fn derived(seed: u64, path: &[u64]) -> Self {
        Self::new(seed, mix(path))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`, safe for logarithms.
    fn uniform_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let r = (-2.0 * self.uniform_open().ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * self.uniform();
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.gaussian()
    }

    /// Normal with scale `std`, redrawn until it lies within `limit * std` of zero.
    pub fn truncated_normal(&mut self, std: f64, limit: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        loop {
            let z = self.gaussian();
            if z.abs() <= limit {
                return std * z;
            }
        }
    }

    pub fn sign(&mut self) -> f64 {
        if self.inner.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform point on the unit sphere in `dim` dimensions.
    pub fn unit_sphere(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| self.gaussian()).collect();
            let norm = l2_norm(&v);
            if norm > 1e-300 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    /// Uniform point in the Euclidean ball of the given radius.
    pub fn uniform_ball(&mut self, dim: usize, radius: f64) -> Vec<f64> {
        let dir = self.unit_sphere(dim);
        let r = radius * self.uniform().powf(1.0 / dim as f64);
        dir.into_iter().map(|x| x * r).collect()
    }

    /// Draws an index from unnormalized nonnegative weights.
    pub fn categorical(&mut self, cumulative: &[f64]) -> usize {
        let total = *cumulative.last().expect("nonempty table");
        let u = self.uniform() * total;
        cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
    }
}

/// SplitMix64 finalizer folded over a label path.
pub fn mix(path: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
