//! Deterministic pseudo-random numbers.
//!
//! Everything stochastic in this crate draws from [`SplitMix64`], a small
//! counter-free generator with an explicitly documented update rule, so that
//! identical seeds reproduce identical artifacts on any platform and in any
//! language that re-implements the same three lines. Gaussian noise uses the
//! Irwin-Hall sum of twelve uniforms, which avoids transcendental functions
//! whose last-bit behaviour differs between libm implementations.

/// SplitMix64 generator (Steele, Lea & Flood; the `java.util.SplittableRandom`
/// finalizer). State advances by the golden-gamma constant and the output is a
/// bijective mix of the state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream for a labelled sub-task (one slide, one
    /// epoch, ...) without disturbing this stream.
    pub fn derive(&self, label: u64) -> SplitMix64 {
        let mut probe = SplitMix64 {
            state: self.state ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        };
        SplitMix64::new(probe.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in `[0, n)`. Rejection sampling keeps the draw unbiased.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn next_in_range(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi);
        lo + self.next_below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Approximately standard-normal deviate: sum of 12 uniforms minus 6
    /// (Irwin-Hall), mean 0 and variance 1 by construction.
    pub fn next_gauss(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
