//! Deterministic 64-bit PRNG used by every randomized component.
//!
//! The generator is a splitmix-style counter RNG defined entirely by its
//! update equations so that independent implementations agree bit-for-bit:
//!
//! ```text
//! state' = state + 0x9E3779B97F4A7C15          (wrapping)
//! z = state'
//! z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9       (wrapping)
//! z ^= z >> 27;  z *= 0x94D049BB133111EB       (wrapping)
//! output = z ^ (z >> 31)
//! ```
//!
//! `next_f64` takes the top 53 bits of the output, giving a uniform value in
//! [0, 1). Substreams are derived from `(seed, stream)` so per-image and
//! per-step randomness is order-independent.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded deterministic generator. Identical seeds yield identical draw
/// sequences on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Generator for substream `stream` of `seed`. Distinct streams are
    /// decorrelated; the parent seed is not consumed.
    pub fn substream(seed: u64, stream: u64) -> Self {
        Rng {
            state: mix(seed).wrapping_add(mix(stream ^ GOLDEN_GAMMA).wrapping_mul(GOLDEN_GAMMA)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive; the modulo bias is
    /// negligible for the small ranges used here.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() requires a non-empty range");
        (self.next_u64() % n as u64) as usize
    }

    pub fn bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (cosine branch only, one draw pair per
    /// sample, so the consumption pattern is fixed).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `k` distinct indices from [0, n), in selection order (partial
    /// Fisher-Yates).
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
