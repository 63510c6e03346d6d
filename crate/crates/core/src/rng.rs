//! Counter-based splittable random streams.
//!
//! Every random quantity in a run is drawn from a [`Stream`] keyed by
//! `(root seed, salt, label)`. Streams are stateless apart from a counter, so
//! two simulations that derive a stream from the same key see bit-identical
//! draws regardless of how many draws the *other* streams have consumed. That
//! is what lets two systems share instructions: a particle's trajectory is a
//! function of its own stream alone.
//!
//! The generator is SplitMix64 evaluated at `key + (i+1) * GOLDEN`: a strong
//! 64-bit avalanche over a Weyl sequence. Keys are produced by folding the
//! label components through the same finalizer.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold one more word into a key.
#[inline]
pub fn fold(key: u64, word: u64) -> u64 {
    mix64(key.wrapping_add(GOLDEN).wrapping_add(word))
}

/// Domain-separation salts for the independent randomness sources of a run.
///
/// Values are arbitrary but frozen: changing them changes every realization.
pub mod salt {
    pub const INSTRUCTIONS: u64 = 0x01;
    pub const INITIAL: u64 = 0x02;
    pub const COUPLING_U: u64 = 0x03;
    pub const TRACER_WALK: u64 = 0x04;
    pub const TRACER_CLOCK: u64 = 0x05;
    pub const ENTANGLE_WALK: u64 = 0x06;
    pub const WANDER: u64 = 0x07;
    pub const BOOTSTRAP: u64 = 0x08;
    pub const GENERIC: u64 = 0x09;
}

/// Key identifying one stream: root seed, a domain salt, and label words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(pub u64);

impl StreamKey {
    pub fn new(seed: u64, salt: u64) -> Self {
        StreamKey(fold(fold(seed, salt), salt ^ GOLDEN))
    }

    /// Mix in an extra label word (site hash, particle index, replica id...).
    pub fn with(self, word: u64) -> Self {
        StreamKey(fold(self.0, word))
    }

    pub fn stream(self) -> Stream {
        Stream { key: self.0, ctr: 0 }
    }
}

/// A deterministic stream of draws at a key. Cheap to create, copy, resume.
#[derive(Debug, Clone, Copy)]
pub struct Stream {
    key: u64,
    ctr: u64,
}

impl Stream {
    pub fn new(seed: u64, salt: u64) -> Self {
        StreamKey::new(seed, salt).stream()
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr += 1;
        mix64(self.key.wrapping_add(self.ctr.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as an argument to `ln`.
    #[inline]
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential holding time with the given rate.
    #[inline]
    pub fn next_exp(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -self.next_f64_open().ln() / rate
    }

    #[inline]
    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `0..n`. Rejection-free modulo bias is fine at
    /// simulation scale only when n is tiny; use Lemire-style rejection.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift with rejection.
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (n as u128);
            let low = m as u64;
            if low >= n.wrapping_neg() % n {
                return (m >> 64) as u64;
            }
        }
    }
}

/// Cumulative table for sampling a finite distribution from one `u64` draw.
///
/// Thresholds are 64-bit fixed point, so selection is exact given the draw;
/// the quantization error per entry is below 2^-63.
#[derive(Debug, Clone)]
pub struct CumTable {
    cum: Vec<u64>,
}

impl CumTable {
    /// Build from nonnegative weights summing to ~1 (validated by callers).
    pub fn new(probs: &[f64]) -> Self {
        assert!(!probs.is_empty());
        let mut cum = Vec::with_capacity(probs.len());
        let mut acc = 0.0f64;
        for &p in probs {
            acc += p;
            let q = (acc * (u64::MAX as f64)).min(u64::MAX as f64);
            cum.push(q as u64);
        }
        // Force the last threshold to saturate so every draw selects.
        *cum.last_mut().unwrap() = u64::MAX;
        CumTable { cum }
    }

    #[inline]
    pub fn pick(&self, draw: u64) -> usize {
        // Support lists are short (a handful of displacements); linear scan
        // beats binary search here.
        for (i, &c) in self.cum.iter().enumerate() {
            if draw <= c {
                return i;
            }
        }
        self.cum.len() - 1
    }

    #[inline]
    pub fn sample(&self, s: &mut Stream) -> usize {
        self.pick(s.next_u64())
    }
}
