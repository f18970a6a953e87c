//! Seeded, platform-independent random streams.
//!
//! [`RngState`] wraps a ChaCha8 keystream keyed by a 64-bit seed and a 64-bit
//! stream id. ChaCha is counter based, so the output sequence depends only on
//! `(seed, stream, word position)` and is identical on every platform. Normal
//! deviates use the Box–Muller transform (evaluated with `libm`, not the host
//! C library) so that they are bit-reproducible as well.

use core::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    seed: u64,
    stream: u64,
    core: ChaCha8Rng,
    spare: Option<f64>,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream);
        RngState {
            seed,
            stream,
            core,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit keystream words consumed so far.
    pub fn counter(&self) -> u128 {
        self.core.get_word_pos()
    }

    /// An independent stream derived from this one's identity (not its
    /// position), keyed by `key`.
    pub fn substream(&self, key: u64) -> RngState {
        RngState::with_stream(self.seed, mix64(self.stream ^ mix64(key.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform draw on the open interval (0, 1) with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's nearly-divisionless method).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as usize;
            }
        }
    }

    /// Standard normal deviate.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// `rows × cols` matrix of i.i.d. `N(0, sigma²)` entries. The stream is
    /// advanced by the same amount for every `sigma`, including zero.
    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        assert!(sigma >= 0.0, "sigma must be nonnegative, got {sigma}");
        let data = (0..rows * cols)
            .map(|_| {
                let z = self.normal();
                if sigma == 0.0 {
                    0.0
                } else {
                    sigma * z
                }
            })
            .collect();
        Matrix::from_raw(rows, cols, data)
    }

    pub fn gaussian_vec(&mut self, len: usize, sigma: f64) -> alloc::vec::Vec<f64> {
        self.gaussian_matrix(1, len, sigma).into_data()
    }

    /// Uniformly distributed unit vector in `R^dim`.
    pub fn unit_vector(&mut self, dim: usize) -> alloc::vec::Vec<f64> {
        loop {
            let mut v = self.gaussian_vec(dim, 1.0);
            let n = crate::linalg::norm(&v);
            if n > 1e-12 {
                v.iter_mut().for_each(|x| *x /= n);
                return v;
            }
        }
    }

    /// `k` distinct indices from `0..n`, in draw order (partial Fisher–Yates).
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> alloc::vec::Vec<usize> {
        assert!(k <= n);
        let mut pool: alloc::vec::Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named cell of an experiment grid. Depends only on the base seed
/// and the key, so the order in which cells are scheduled is irrelevant.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    // FNV-1a over the key, then mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix64(base ^ mix64(h))
}
