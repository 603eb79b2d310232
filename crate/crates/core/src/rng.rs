//! Seeded, splittable random streams.
//!
//! The generator is a keyed counter-mode splitmix64: drawing advances a
//! counter, and `split` derives an independent child key from a path of
//! integers. A value drawn from `split(&[t, j, i])` is therefore a pure
//! function of `(seed, t, j, i)` regardless of iteration order, which is what
//! the per-step noise layers rely on for reproducibility.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn combine(key: u64, v: u64) -> u64 {
    mix(key ^ mix(v.wrapping_add(GOLDEN)))
}

/// Deterministic random stream. Identical seed and call sequence produce an
/// identical value sequence; children from `split` are independent of draws
/// made on the parent.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    /// Derives an independent stream keyed by `path`. Does not consume state.
    pub fn split(&self, path: &[u64]) -> Rng {
        let mut key = self.key;
        for &p in path {
            key = combine(key, p);
        }
        // Decouple the child from the parent's own draw sequence.
        Rng {
            key: mix(key.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(c.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi). Degenerate bounds (lo == hi) return lo exactly.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Standard normal via Box–Muller.
    pub fn standard_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal with the given mean and standard deviation; `sd == 0` returns
    /// `mean` exactly.
    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // 53-bit mantissa path keeps this exact for any realistic n.
        (self.unit() * n as f64) as usize % n
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
