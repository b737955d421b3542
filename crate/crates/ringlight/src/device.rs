//! Signed-weight differential encoding and the Lorentzian detuning LUT.
//!
//! A signed weight `w_s in [-1, 1]` is a constant-sum pair of unipolar
//! transmissions `w+ = (w_s+1)/2`, `w- = (1-w_s)/2`. Levels are mapped to
//! ring detunings through the Lorentzian `L(D) = 1/(1 + (2D/Gamma)^2)`.
//!
//! Detunings are clamped at `delta_max` to stay out of the Lorentzian tails.
//! Because `L` never reaches 0, the LUT places its levels on the usable
//! transmission window `[L(delta_max), 1]` (an affine remap undone
//! electronically after the balanced photodetector), so every level has an
//! exactly representable detuning and decode error is bounded by
//! quantization alone across the whole signed range.

use crate::math::rng::SeedContext;
use crate::noise::NoiseParams;
use crate::{Error, Result};

/// FWHM linewidth Gamma, nanometers.
pub const DEFAULT_LINEWIDTH_NM: f64 = 1.2;
/// Maximum programmable detuning, nanometers.
pub const DEFAULT_DELTA_MAX_NM: f64 = 2.2;

/// Constant-sum pair of unipolar transmissions encoding one signed weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferentialWeight {
    pub w_plus: f64,
    pub w_minus: f64,
}

impl DifferentialWeight {
    pub fn decode(&self) -> f64 {
        self.w_plus - self.w_minus
    }
}

/// Detunings of the two rings of a pair, nanometers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetuningPair {
    pub delta_plus_nm: f64,
    pub delta_minus_nm: f64,
}

/// Balanced differential encoding of `w_s in [-1, 1]`.
///
/// Out-of-range weights clamp with a warning; callers on the matmul path
/// pre-scale so this never fires there.
pub fn encode_signed(w_s: f64) -> DifferentialWeight {
    let w = if w_s.abs() > 1.0 {
        log::warn!("encode_signed: clamping out-of-range weight {w_s}");
        w_s.clamp(-1.0, 1.0)
    } else {
        w_s
    };
    DifferentialWeight { w_plus: (w + 1.0) / 2.0, w_minus: (1.0 - w) / 2.0 }
}

/// Lorentzian transmission at detuning `delta_nm` for linewidth `gamma_nm`.
pub fn lorentzian(delta_nm: f64, gamma_nm: f64) -> f64 {
    let r = 2.0 * delta_nm / gamma_nm;
    1.0 / (1.0 + r * r)
}

/// Result of inverting the Lorentzian for a target transmission level.
#[derive(Debug, Clone, Copy)]
pub struct Detuning {
    pub delta_nm: f64,
    /// Transmission actually realized at `delta_nm` (differs from the
    /// request only when clamped).
    pub achieved: f64,
    pub clamped: bool,
}

/// Inverse Lorentzian `D = (Gamma/2) sqrt(1/L - 1)`, clamped to
/// `[0, delta_max_nm]`.
pub fn detuning_for(level: f64, gamma_nm: f64, delta_max_nm: f64) -> Result<Detuning> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Param(format!("transmission level must be in (0,1], got {level}")));
    }
    let delta = (gamma_nm / 2.0) * (1.0 / level - 1.0).sqrt();
    if delta > delta_max_nm {
        Ok(Detuning {
            delta_nm: delta_max_nm,
            achieved: lorentzian(delta_max_nm, gamma_nm),
            clamped: true,
        })
    } else {
        Ok(Detuning { delta_nm: delta, achieved: level, clamped: false })
    }
}

/// Width above which the level grid sits below the f64 noise floor of the
/// surrounding matmuls; lookups then program the exact target transmission
/// instead of rounding to a grid index.
pub const CONTINUOUS_BITS: u32 = 25;

/// Detuning lookup for `2^bits` uniformly spaced levels on [0, 1].
///
/// Entry deltas are computed on demand so 32-bit resolution needs no
/// 2^32-entry table; `entries()` materializes small tables for export.
#[derive(Debug, Clone)]
pub struct DetuningLut {
    bits: u32,
    gamma_nm: f64,
    delta_max_nm: f64,
    /// Lower edge of the usable transmission window, `L(delta_max)`.
    floor: f64,
}

/// One LUT row: a quantized level and the detunings programmed when the
/// level is used as w+ (its complement is then w-).
#[derive(Debug, Clone, Copy)]
pub struct LutEntry {
    pub level: f64,
    pub delta_plus_nm: f64,
    pub delta_minus_nm: f64,
}

impl DetuningLut {
    pub fn new(bits: u32, gamma_nm: f64, delta_max_nm: f64) -> Result<Self> {
        if !(1..=32).contains(&bits) {
            return Err(Error::Param(format!("LUT bits must be in 1..=32, got {bits}")));
        }
        if !(gamma_nm > 0.0 && delta_max_nm > 0.0) {
            return Err(Error::Param("LUT requires positive gamma and delta_max".into()));
        }
        let floor = lorentzian(delta_max_nm, gamma_nm);
        Ok(Self { bits, gamma_nm, delta_max_nm, floor })
    }

    /// Standard device LUT: Gamma = 1.2 nm, delta_max = 2.2 nm.
    pub fn with_bits(bits: u32) -> Result<Self> {
        Self::new(bits, DEFAULT_LINEWIDTH_NM, DEFAULT_DELTA_MAX_NM)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> u64 {
        1u64 << self.bits
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn gamma_nm(&self) -> f64 {
        self.gamma_nm
    }

    pub fn delta_max_nm(&self) -> f64 {
        self.delta_max_nm
    }

    /// Transmission floor `L(delta_max)`; the decode gain is
    /// `1 / (1 - floor)`.
    pub fn transmission_floor(&self) -> f64 {
        self.floor
    }

    #[inline]
    fn step_denom(&self) -> f64 {
        (self.len() - 1) as f64
    }

    /// Level value of entry `i`.
    #[inline]
    pub fn level_of(&self, i: u64) -> f64 {
        i as f64 / self.step_denom()
    }

    /// Nearest quantized index for a unipolar level in [0, 1].
    #[inline]
    pub fn quantize(&self, level: f64) -> u64 {
        let l = level.clamp(0.0, 1.0);
        (l * self.step_denom()).round() as u64
    }

    /// Target transmission for a level: affine map onto the usable window.
    #[inline]
    pub fn transmission_of_level(&self, level: f64) -> f64 {
        self.floor + level * (1.0 - self.floor)
    }

    /// Invert [`Self::transmission_of_level`].
    #[inline]
    pub fn level_of_transmission(&self, t: f64) -> f64 {
        (t - self.floor) / (1.0 - self.floor)
    }

    /// Detuning programmed for entry `i`.
    pub fn delta_of(&self, i: u64) -> f64 {
        let t = self.transmission_of_level(self.level_of(i));
        detuning_for(t, self.gamma_nm, self.delta_max_nm)
            .expect("window transmission is always in (0,1]")
            .delta_nm
    }

    /// Quantize a signed weight onto the grid and return the detuning pair,
    /// using complementary indices so the pair keeps its constant sum
    /// exactly at grid resolution. Above [`CONTINUOUS_BITS`] the grid is
    /// finer than downstream f64 arithmetic resolves and the rounding is
    /// skipped.
    pub fn lookup_signed(&self, w_s: f64) -> (DetuningPair, u64) {
        let pair = encode_signed(w_s);
        if self.bits > CONTINUOUS_BITS {
            let d = |level: f64| {
                detuning_for(self.transmission_of_level(level), self.gamma_nm, self.delta_max_nm)
                    .expect("window transmission is always in (0,1]")
                    .delta_nm
            };
            return (
                DetuningPair {
                    delta_plus_nm: d(pair.w_plus),
                    delta_minus_nm: d(pair.w_minus),
                },
                self.quantize(pair.w_plus),
            );
        }
        let i_plus = self.quantize(pair.w_plus);
        let i_minus = (self.len() - 1) - i_plus;
        (
            DetuningPair {
                delta_plus_nm: self.delta_of(i_plus),
                delta_minus_nm: self.delta_of(i_minus),
            },
            i_plus,
        )
    }

    /// Decode a detuning pair back to a signed weight by reading the two
    /// transmissions and undoing the window map.
    pub fn decode_pair(&self, pair: &DetuningPair) -> f64 {
        let t_plus = lorentzian(pair.delta_plus_nm, self.gamma_nm);
        let t_minus = lorentzian(pair.delta_minus_nm, self.gamma_nm);
        (t_plus - t_minus) / (1.0 - self.floor)
    }

    /// Materialized rows `(level, delta_plus, delta_minus)`; refused above
    /// 16 bits where the table would be impractically large.
    pub fn entries(&self) -> Result<Vec<LutEntry>> {
        if self.bits > 16 {
            return Err(Error::Param(format!(
                "refusing to materialize a {}-bit LUT; use delta_of()",
                self.bits
            )));
        }
        let n = self.len();
        Ok((0..n)
            .map(|i| LutEntry {
                level: self.level_of(i),
                delta_plus_nm: self.delta_of(i),
                delta_minus_nm: self.delta_of(n - 1 - i),
            })
            .collect())
    }
}

/// Post-trim residual jitter: adds independent `dl ~ N(mu_r, sigma_lambda^2)`
/// per ring, re-clamped to `[0, delta_max]`.
pub fn apply_jitter(
    pair: &DetuningPair,
    params: &NoiseParams,
    ctx: &SeedContext,
    delta_max_nm: f64,
) -> DetuningPair {
    let s = ctx.stream();
    let mean_nm = params.jitter_bias_pm / 1000.0;
    let std_nm = params.jitter_std_pm / 1000.0;
    let d_plus = s.normal_at(0, mean_nm, std_nm);
    let d_minus = s.normal_at(1, mean_nm, std_nm);
    DetuningPair {
        delta_plus_nm: (pair.delta_plus_nm + d_plus).clamp(0.0, delta_max_nm),
        delta_minus_nm: (pair.delta_minus_nm + d_minus).clamp(0.0, delta_max_nm),
    }
}

/// Resonance wavelength `lambda = n_eff * L / m` in nanometers, for a ring
/// length in micrometers. Informational only.
pub fn resonance_wavelength(n_eff: f64, ring_length_um: f64, mode_order: u32) -> f64 {
    n_eff * ring_length_um * 1000.0 / mode_order as f64
}
