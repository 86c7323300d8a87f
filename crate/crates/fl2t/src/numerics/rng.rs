//! Seeded random number generation with a pinned algorithm.
//!
//! The generator is splitmix64 feeding Box-Muller. Both algorithms are
//! written out here rather than pulled from a crate so the byte-identical
//! reproducibility contract cannot drift with a dependency upgrade.

use crate::numerics::Matrix;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Deterministic RNG: splitmix64 state transition, Box-Muller normals.
///
/// A given seed always produces the same sequence of draws, regardless of
/// platform or thread count. Independent streams for parallel work come
/// from [`SeededRng::derive_seed`].
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
    cached_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> SeededRng {
        SeededRng {
            state: seed,
            cached_normal: None,
        }
    }

    /// Child seed for stream `stream` of a master seed.
    ///
    /// Streams are decorrelated by scrambling the master seed XORed with a
    /// golden-ratio multiple of the stream index through the splitmix64
    /// output permutation twice.
    pub fn derive_seed(master: u64, stream: u64) -> u64 {
        let mixed = master ^ stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA);
        scramble(scramble(mixed))
    }

    /// Next raw 64-bit draw (splitmix64).
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        scramble(self.state)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `{0, 1, ..., n-1}` via the fixed-point multiply
    /// method (no modulo bias worth caring about at these ranges).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "next_index needs a nonempty range");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw via Box-Muller.
    ///
    /// Each transform yields a (cos, sin) pair; the second value is cached
    /// so consecutive calls consume exactly two uniforms per pair.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // Map onto (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn scramble(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Matrix with i.i.d. `N(mean, std^2)` entries, filled in row-major order.
pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = mean + std * rng.next_gaussian();
    }
    m
}
