//! Seedable pseudo-random source.
//!
//! The generator is xoshiro256++ (Blackman & Vigna) with its 256-bit state
//! expanded from a 64-bit seed by SplitMix64. Uniform doubles take the top 53
//! bits of one output. Normal variates use the Box–Muller transform; each
//! transform yields two variates and the second is kept as a spare for the
//! next call. The spare is part of the serializable state, so a restored
//! generator continues the exact stream.

use super::Tensor2D;
use crate::error::{Error, Result};

/// Complete generator state, sufficient to resume the stream bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub words: [u64; 4],
    /// Bit pattern of the cached Box–Muller spare, if any.
    pub spare_normal: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeededRng {
    s: [u64; 4],
    spare: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { s, spare: None }
    }

    pub fn state(&self) -> RngState {
        RngState {
            words: self.s,
            spare_normal: self.spare.map(f64::to_bits),
        }
    }

    pub fn from_state(state: RngState) -> Result<Self> {
        if state.words == [0; 4] {
            return Err(Error::invalid("xoshiro state must not be all zero"));
        }
        Ok(Self {
            s: state.words,
            spare: state.spare_normal.map(f64::from_bits),
        })
    }

    /// Derives an independent generator, advancing this one by one draw.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Uniform integer in `[0, n)` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal variate.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. normal draws of the given shape.
pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Tensor2D> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid(format!("gaussian needs finite mean and std >= 0, got mean={mean} std={std}")));
    }
    let data = (0..rows * cols).map(|_| mean + std * rng.normal()).collect();
    Tensor2D::new(rows, cols, data)
}

/// 0/1 mask whose entries are 1 with probability `keep_prob`.
pub fn bernoulli_mask(rng: &mut SeededRng, rows: usize, cols: usize, keep_prob: f64) -> Result<Tensor2D> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid(format!("keep_prob must lie in (0, 1], got {keep_prob}")));
    }
    let data = (0..rows * cols)
        .map(|_| if rng.uniform01() < keep_prob { 1.0 } else { 0.0 })
        .collect();
    Tensor2D::new(rows, cols, data)
}
