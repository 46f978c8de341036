//! Deterministic random number generation.
//!
//! Everything stochastic in this crate (weight init, synthetic audio,
//! augmentation draws, data shuffles) flows through [`Rng`], a xoshiro256**
//! generator seeded through splitmix64. The generators are implemented here
//! rather than pulled from a crate so that the exact bit stream is pinned by
//! this repository: archives, checkpoints and synthetic corpora must be
//! byte-reproducible from a seed alone, across releases and platforms.
//!
//! # Stream derivation
//!
//! Independent streams are derived from a master seed and a string label:
//!
//! ```text
//! stream_seed = master_seed XOR fnv1a64(label)
//! state[0..4] = four successive splitmix64 outputs from stream_seed
//! ```
//!
//! Every consumer uses a distinct label (for weight matrices, the parameter
//! name, e.g. `"init/adapter_t.w1"`), so adding or removing one consumer
//! never perturbs the draws seen by another.

/// One step of the splitmix64 sequence. Advances `state` and returns the
/// next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a 64-bit hash. Used for label hashing and for mapping caption tokens
/// to embedding streams; stable by construction, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// xoshiro256** generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Seed directly from a 64-bit value via splitmix64 expansion.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Derive a labeled stream from a master seed. See the module docs for
    /// the exact scheme.
    pub fn derive(master_seed: u64, label: &str) -> Self {
        Rng::from_seed(master_seed ^ fnv1a64(label.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller (cosine branch only, so exactly one
    /// uniform pair is consumed per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
