//! Deterministic random source.
//!
//! Every random-consuming operation in this crate is a pure function of
//! `(seed, arguments)`. The generator is SplitMix64 (Steele, Lea & Flood,
//! "Fast splittable pseudorandom number generators", OOPSLA 2014), chosen
//! because the full sample sequence is specified by a handful of integer
//! constants and therefore trivially reproducible in any language:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Derived samples are defined on top of the u64 stream:
//! * uniform f64 in (0, 1): `(next_u64() >> 11) + 0.5` scaled by 2^-53
//! * standard normal: Box-Muller on two uniforms, `z0 = sqrt(-2 ln u1) cos(2 pi u2)`,
//!   `z1 = sqrt(-2 ln u1) sin(2 pi u2)`; `z0` is returned first, `z1` is cached
//!   and returned by the next call without consuming the u64 stream.

/// Seeded deterministic generator. Identical seed gives an identical sample
/// sequence across runs.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent child stream: consumes one u64 from this stream as the
    /// child's seed.
    pub fn split(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in the open interval (0, 1); never returns 0 or 1 exactly, so
    /// it is safe inside logs.
    pub fn uniform(&mut self) -> f64 {
        (((self.next_u64() >> 11) as f64) + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Standard normal sample (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform index in `[0, bound)` by modulo reduction. The (documented)
    /// modulo bias is below 2^-50 for every bound used in this crate.
    pub fn index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "index bound must be positive");
        (self.next_u64() % bound as u64) as usize
    }

    /// In-place Fisher-Yates shuffle; a pure function of (seed state, len).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
