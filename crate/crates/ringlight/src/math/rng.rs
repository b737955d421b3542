//! Deterministic counter-based random streams addressed by labeled paths.
//!
//! A [`SeedContext`] names a sub-stream as `(master_seed, [(label, index), ...])`.
//! Draw `i` of a stream is a pure function of the stream key and `i`, so any
//! draw sequence is reproducible independent of evaluation order or thread
//! count, and fabrication draws for a chip stay identical whether or not
//! thermal/laser draws happen in between.

use crate::math::normal::std_normal_quantile_unchecked;
use crate::{Error, Result};

/// Well-known path labels used by the emulator.
pub mod labels {
    pub const CHIP: &str = "chip";
    pub const LAYER: &str = "layer";
    pub const OP: &str = "op";
    pub const HEAD: &str = "head";
    pub const TILE: &str = "tile";
    pub const PASS: &str = "pass";
    pub const CYCLE: &str = "cycle";
    pub const TRIAL: &str = "trial";
    pub const FAB: &str = "fab";
    pub const THERMAL: &str = "thermal";
    pub const LASER: &str = "laser";
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: strong bit diffusion, non-cryptographic.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes, so distinct labels address distinct streams.
#[inline]
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Addressable sub-stream: a master seed plus an ordered list of labeled
/// indices (e.g. chip / layer / tile / trial).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedContext {
    master_seed: u64,
    path: Vec<(String, u64)>,
}

impl SeedContext {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed, path: Vec::new() }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    /// Descend into the labeled sub-stream `(label, index)`.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push((label.to_string(), index));
        Self { master_seed: self.master_seed, path }
    }

    /// Copy of this context with every path element whose label is in
    /// `labels` removed. Used to freeze a stream against faster time scales
    /// (e.g. fabrication draws ignore pass and cycle indices).
    pub fn strip(&self, labels: &[&str]) -> Self {
        let path = self
            .path
            .iter()
            .filter(|(l, _)| !labels.iter().any(|s| s == l))
            .cloned()
            .collect();
        Self { master_seed: self.master_seed, path }
    }

    /// The counter-based stream addressed by this context.
    pub fn stream(&self) -> Stream {
        let mut key = mix(self.master_seed ^ GOLDEN);
        for (label, index) in &self.path {
            key = mix(key ^ hash_label(label));
            key = mix(key.wrapping_add(*index).wrapping_mul(GOLDEN) ^ *index);
        }
        Stream { key }
    }

    /// `n` i.i.d. normal draws from this context's stream.
    ///
    /// `std == 0` returns `n` exact copies of `mean`.
    pub fn gauss(&self, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
        if !(std >= 0.0) {
            return Err(Error::Param(format!("gauss requires std >= 0, got {std}")));
        }
        let s = self.stream();
        Ok((0..n).map(|i| s.normal_at(i as u64, mean, std)).collect())
    }
}

/// A keyed counter stream: draw `i` is `mix(key + i * GOLDEN)`.
#[derive(Debug, Clone, Copy)]
pub struct Stream {
    key: u64,
}

impl Stream {
    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix(self.key ^ counter.wrapping_mul(GOLDEN).wrapping_add(GOLDEN))
    }

    /// Uniform draw in the open interval (0, 1), 53-bit resolution.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        // +0.5 keeps the value strictly inside (0,1) so the normal quantile
        // stays finite.
        (((self.u64_at(counter) >> 11) as f64) + 0.5) / (1u64 << 53) as f64
    }

    /// Standard-normal draw `i` via the inverse CDF.
    #[inline]
    pub fn std_normal_at(&self, counter: u64) -> f64 {
        std_normal_quantile_unchecked(self.uniform_at(counter))
    }

    /// Normal draw `i`; `std == 0` returns exactly `mean`.
    #[inline]
    pub fn normal_at(&self, counter: u64, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            mean
        } else {
            mean + std * self.std_normal_at(counter)
        }
    }

    /// Uniform integer in `[0, bound)` by 128-bit multiply (bound << 2^64,
    /// modulo bias negligible and deterministic either way).
    #[inline]
    pub fn index_at(&self, counter: u64, bound: u64) -> u64 {
        ((self.u64_at(counter) as u128 * bound as u128) >> 64) as u64
    }
}
