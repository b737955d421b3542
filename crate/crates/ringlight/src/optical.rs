//! Tiling of matrix products onto the optical core and the noisy emulation.
//!
//! A K x N weight matrix is split into row tiles of `wavelengths` rows and
//! column tiles of `arms` columns. Per input row, each tile activation is
//! one optical cycle on one core; column tiles round-robin across cores.
//!
//! The noisy path per tile: signed weights pass encode -> LUT quantize ->
//! (post-trim) detuning jitter -> Lorentzian decode, then the multiplicative
//! fabrication/thermal pair factor `1 + eps + eta` (pre-trim eps; thermal in
//! both regimes), inputs are scaled by `1 + zeta`, and each arm's balanced
//! photodetector difference accumulates electronically at full precision.
//! Weight matrices are pre-scaled by `max(1, max|w|)` so any real-valued
//! matrix maps into the encodable range; the scale is undone after readout.

use serde::Serialize;

use crate::device::{lorentzian, DetuningLut, DetuningPair, DEFAULT_DELTA_MAX_NM};
use crate::math::matrix::Matrix;
use crate::math::rng::{labels, SeedContext};
use crate::noise::{LaserMode, NoiseParams, TrimRegime};
use crate::{Error, Result};

/// Dimensions of one optical core and the core count of the chip.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoreGeometry {
    pub arms: usize,
    pub rings_per_arm: usize,
    pub wavelengths: usize,
    pub cores: usize,
}

impl Default for CoreGeometry {
    fn default() -> Self {
        Self { arms: 64, rings_per_arm: 32, wavelengths: 32, cores: 5 }
    }
}

impl CoreGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.arms == 0 || self.rings_per_arm == 0 || self.wavelengths == 0 || self.cores == 0 {
            return Err(Error::Param("core geometry fields must be positive".into()));
        }
        if self.wavelengths > self.rings_per_arm {
            return Err(Error::Param(format!(
                "wavelengths {} exceed rings per arm {}",
                self.wavelengths, self.rings_per_arm
            )));
        }
        Ok(())
    }
}

/// One weight sub-block: `k` (wavelength) and `n` (arm) ranges plus its
/// per-input-row cycle slot and core assignment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tile {
    pub index: usize,
    pub k_start: usize,
    pub k_end: usize,
    pub n_start: usize,
    pub n_end: usize,
    pub cycle: usize,
    pub core: usize,
}

impl Tile {
    pub fn k_len(&self) -> usize {
        self.k_end - self.k_start
    }

    pub fn n_len(&self) -> usize {
        self.n_end - self.n_start
    }
}

/// Decomposition of an M x K x N product onto the core geometry.
#[derive(Debug, Clone, Serialize)]
pub struct TileSchedule {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub row_tiles: usize,
    pub col_tiles: usize,
    /// Cycles needed to stream one input row through all tiles.
    pub per_row_cycles: usize,
    pub cycles_total: usize,
    pub geometry: CoreGeometry,
    pub tiles: Vec<Tile>,
}

impl TileSchedule {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Event counts feeding the energy/latency model.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CycleCounts {
    pub optical_cycles: u64,
    /// Input scalar conversions: one per tile row element per input row.
    pub dac_ops: u64,
    /// Output conversions: one per tile column element per input row, i.e.
    /// output elements times their column-tile accumulation count.
    pub adc_reads: u64,
    /// One VCSEL activation per DAC conversion.
    pub vcsel_activations: u64,
    /// One balanced-photodetector read per ADC conversion.
    pub bpd_reads: u64,
    /// MR pair programming events: each tile's weights tuned once and held
    /// across the input rows.
    pub tuning_ops: u64,
}

impl CycleCounts {
    pub fn add(&mut self, other: &CycleCounts) {
        self.optical_cycles += other.optical_cycles;
        self.dac_ops += other.dac_ops;
        self.adc_reads += other.adc_reads;
        self.vcsel_activations += other.vcsel_activations;
        self.bpd_reads += other.bpd_reads;
        self.tuning_ops += other.tuning_ops;
    }
}

/// Split an `m x k` by `k x n` product over the geometry.
///
/// Per-input-row cycles = ceil(row_tiles * col_tiles / min(col_tiles, cores)).
pub fn build_schedule(m: usize, k: usize, n: usize, geom: CoreGeometry) -> Result<TileSchedule> {
    geom.validate()?;
    if m == 0 || k == 0 || n == 0 {
        return Err(Error::Param(format!("schedule dims must be positive, got {m}x{k}x{n}")));
    }
    let row_tiles = k.div_ceil(geom.wavelengths);
    let col_tiles = n.div_ceil(geom.arms);
    let active_cores = col_tiles.min(geom.cores);
    let n_tiles = row_tiles * col_tiles;
    let per_row_cycles = n_tiles.div_ceil(active_cores);

    let mut tiles = Vec::with_capacity(n_tiles);
    for rt in 0..row_tiles {
        for ct in 0..col_tiles {
            let index = rt * col_tiles + ct;
            tiles.push(Tile {
                index,
                k_start: rt * geom.wavelengths,
                k_end: ((rt + 1) * geom.wavelengths).min(k),
                n_start: ct * geom.arms,
                n_end: ((ct + 1) * geom.arms).min(n),
                cycle: index / active_cores,
                core: index % active_cores,
            });
        }
    }
    Ok(TileSchedule {
        m,
        k,
        n,
        row_tiles,
        col_tiles,
        per_row_cycles,
        cycles_total: per_row_cycles * m,
        geometry: geom,
        tiles,
    })
}

/// Conversion and cycle counts for running the schedule over `m` input rows.
pub fn cycles_and_conversions(schedule: &TileSchedule, m: usize) -> CycleCounts {
    let mut per_row_dac = 0u64;
    let mut per_row_adc = 0u64;
    let mut tuning = 0u64;
    for t in &schedule.tiles {
        per_row_dac += t.k_len() as u64;
        per_row_adc += t.n_len() as u64;
        tuning += (t.k_len() * t.n_len()) as u64;
    }
    let m = m as u64;
    CycleCounts {
        optical_cycles: schedule.per_row_cycles as u64 * m,
        dac_ops: per_row_dac * m,
        adc_reads: per_row_adc * m,
        vcsel_activations: per_row_dac * m,
        bpd_reads: per_row_adc * m,
        tuning_ops: tuning,
    }
}

/// Emulator settings for the optical matmul path.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OpticalConfig {
    pub geometry: CoreGeometry,
    pub lut_bits: u32,
    pub delta_max_nm: f64,
    /// When set, weight-noise draw counters cover the padded tile footprint
    /// instead of the occupied lanes. Padded lanes carry zero input power,
    /// so this re-keys draws without changing any occupied-lane statistics.
    pub noise_on_padding: bool,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        Self {
            geometry: CoreGeometry::default(),
            lut_bits: 32,
            delta_max_nm: DEFAULT_DELTA_MAX_NM,
            noise_on_padding: false,
        }
    }
}

impl OpticalConfig {
    pub fn with_lut_bits(bits: u32) -> Self {
        Self { lut_bits: bits, ..Self::default() }
    }
}

/// Emulated optical product `x . w` under the configured noise.
///
/// Noise streams are keyed by tile index relative to `ctx`, with the
/// fabrication components frozen against `pass`/`cycle`/`trial` path
/// elements, so results do not depend on tile evaluation order and the
/// same chip context reproduces the same fabrication draw on every pass.
pub fn noisy_matmul(
    x: &Matrix,
    w: &Matrix,
    cfg: &OpticalConfig,
    params: &NoiseParams,
    ctx: &SeedContext,
) -> Result<(Matrix, TileSchedule)> {
    if x.cols() != w.rows() {
        return Err(Error::Shape(format!(
            "noisy_matmul {}x{} . {}x{}",
            x.rows(),
            x.cols(),
            w.rows(),
            w.cols()
        )));
    }
    params.validate()?;
    let schedule = build_schedule(x.rows(), w.rows(), w.cols(), cfg.geometry)?;
    let lut = DetuningLut::new(cfg.lut_bits, params.linewidth_nm, cfg.delta_max_nm)?;

    // Pre-scale weights to span the encodable range (per-matrix
    // calibration gain, undone after readout). Spanning the full range
    // rather than merely clamping into it keeps LUT quantization error
    // proportional to the matrix's own scale.
    let max_abs = w.max_abs();
    let w_scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    let inv_scale = 1.0 / w_scale;

    let mut out = Matrix::zeros(x.rows(), w.cols());
    let decode_gain = 1.0 / (1.0 - lut.transmission_floor());

    for tile in &schedule.tiles {
        let tctx = ctx.child(labels::TILE, tile.index as u64);
        let fab = tctx
            .strip(&[labels::PASS, labels::CYCLE, labels::TRIAL])
            .child(labels::FAB, 0)
            .stream();
        let thermal = tctx.strip(&[labels::CYCLE]).child(labels::THERMAL, 0).stream();

        let k_len = tile.k_len();
        let n_len = tile.n_len();
        let noise_stride = if cfg.noise_on_padding { cfg.geometry.arms } else { n_len };

        // Effective signed transmissions after quantization, jitter, and the
        // multiplicative pair noise, one per weight of the tile.
        let mut eff = vec![0.0f64; k_len * n_len];
        for lk in 0..k_len {
            for ln in 0..n_len {
                let widx = (lk * noise_stride + ln) as u64;
                let w_s = w.get(tile.k_start + lk, tile.n_start + ln) * inv_scale;
                let (mut pair, _) = lut.lookup_signed(w_s);
                if params.regime == TrimRegime::PostTrim
                    && (params.jitter_std_pm != 0.0 || params.jitter_bias_pm != 0.0)
                {
                    let mean_nm = params.jitter_bias_pm / 1000.0;
                    let std_nm = params.jitter_std_pm / 1000.0;
                    pair = DetuningPair {
                        delta_plus_nm: (pair.delta_plus_nm
                            + fab.normal_at(2 * widx, mean_nm, std_nm))
                        .clamp(0.0, cfg.delta_max_nm),
                        delta_minus_nm: (pair.delta_minus_nm
                            + fab.normal_at(2 * widx + 1, mean_nm, std_nm))
                        .clamp(0.0, cfg.delta_max_nm),
                    };
                }
                let t_plus = lorentzian(pair.delta_plus_nm, params.linewidth_nm);
                let t_minus = lorentzian(pair.delta_minus_nm, params.linewidth_nm);
                let mut mult = 1.0;
                if params.regime == TrimRegime::PreTrim && params.sigma_fab != 0.0 {
                    mult += fab.normal_at(widx, 0.0, params.sigma_fab);
                }
                if params.sigma_thermal != 0.0 {
                    mult += thermal.normal_at(widx, 0.0, params.sigma_thermal);
                }
                eff[lk * n_len + ln] = (t_plus - t_minus) * mult;
            }
        }

        for row in 0..x.rows() {
            let laser =
                tctx.child(labels::CYCLE, row as u64).child(labels::LASER, 0).stream();
            let out_row = out.row_mut(row);
            for lk in 0..k_len {
                let zeta = if params.sigma_laser == 0.0 {
                    0.0
                } else {
                    match params.laser_mode {
                        LaserMode::PerChannel => laser.normal_at(lk as u64, 0.0, params.sigma_laser),
                        LaserMode::GlobalPerCycle => laser.normal_at(0, 0.0, params.sigma_laser),
                    }
                };
                let xv = x.get(row, tile.k_start + lk) * (1.0 + zeta);
                if xv == 0.0 {
                    continue;
                }
                let erow = &eff[lk * n_len..(lk + 1) * n_len];
                for (ln, e) in erow.iter().enumerate() {
                    out_row[tile.n_start + ln] += xv * e;
                }
            }
        }
    }

    let y = out.scale(decode_gain * w_scale);
    Ok((y, schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::matrix::{matmul, rel_frobenius};

    fn exact(x: &Matrix, w: &Matrix) -> Matrix {
        matmul(x, w).unwrap()
    }

    #[test]
    fn schedule_single_tile_case() {
        let s = build_schedule(1, 32, 64, CoreGeometry { cores: 1, ..Default::default() }).unwrap();
        assert_eq!(s.tiles.len(), 1);
        assert_eq!(s.per_row_cycles, 1);
        assert_eq!(s.cycles_total, 1);
    }

    #[test]
    fn schedule_192_gives_18_tiles() {
        let s = build_schedule(1, 192, 192, CoreGeometry::default()).unwrap();
        assert_eq!(s.row_tiles, 6);
        assert_eq!(s.col_tiles, 3);
        assert_eq!(s.tiles.len(), 18);
        assert_eq!(s.per_row_cycles, 18usize.div_ceil(3));
    }

    #[test]
    fn schedule_384_gives_72_tiles() {
        let s = build_schedule(1, 384, 384, CoreGeometry::default()).unwrap();
        assert_eq!(s.row_tiles, 12);
        assert_eq!(s.col_tiles, 6);
        assert_eq!(s.tiles.len(), 72);
        assert_eq!(s.per_row_cycles, 72usize.div_ceil(5));
    }

    #[test]
    fn schedule_partitions_weights_exactly() {
        let geom = CoreGeometry::default();
        let dims = SeedContext::new(21).child("dims", 0).stream();
        for t in 0..40u64 {
            let k = 1 + dims.index_at(2 * t, 130) as usize;
            let n = 1 + dims.index_at(2 * t + 1, 130) as usize;
            let s = build_schedule(1, k, n, geom).unwrap();
            let mut covered = vec![0u8; k * n];
            for tile in &s.tiles {
                for kk in tile.k_start..tile.k_end {
                    for nn in tile.n_start..tile.n_end {
                        covered[kk * n + nn] += 1;
                    }
                }
            }
            assert!(covered.iter().all(|c| *c == 1), "k={k} n={n}");
        }
    }

    #[test]
    fn counts_single_tile_example() {
        let s = build_schedule(1, 32, 64, CoreGeometry { cores: 1, ..Default::default() }).unwrap();
        let c = cycles_and_conversions(&s, 1);
        assert_eq!(c.adc_reads, 64);
        assert_eq!(c.optical_cycles, 1);
        assert_eq!(c.dac_ops, 32);
        assert_eq!(c.bpd_reads, c.adc_reads);
        assert_eq!(c.vcsel_activations, c.dac_ops);
    }

    #[test]
    fn counts_scale_linearly_in_m() {
        let s = build_schedule(1, 100, 90, CoreGeometry::default()).unwrap();
        let c1 = cycles_and_conversions(&s, 1);
        let c7 = cycles_and_conversions(&s, 7);
        assert_eq!(c7.adc_reads, 7 * c1.adc_reads);
        assert_eq!(c7.dac_ops, 7 * c1.dac_ops);
        assert_eq!(c7.optical_cycles, 7 * c1.optical_cycles);
        // Tuning is per tile, not per row.
        assert_eq!(c7.tuning_ops, c1.tuning_ops);
    }

    #[test]
    fn counts_match_brute_force_schedule_walk() {
        let s = build_schedule(4, 192, 192, CoreGeometry::default()).unwrap();
        let c = cycles_and_conversions(&s, 4);
        let mut dac = 0u64;
        let mut adc = 0u64;
        for _row in 0..4 {
            for t in &s.tiles {
                dac += t.k_len() as u64;
                adc += t.n_len() as u64;
            }
        }
        assert_eq!(c.dac_ops, dac);
        assert_eq!(c.adc_reads, adc);
        let max_cycle = s.tiles.iter().map(|t| t.cycle).max().unwrap();
        assert_eq!(s.per_row_cycles, max_cycle + 1);
    }

    #[test]
    fn noiseless_matches_exact_product() {
        let ctx = SeedContext::new(31);
        let x = Matrix::random_uniform(&ctx.child("x", 0), 8, 8, -1.0, 1.0);
        let w = Matrix::random_uniform(&ctx.child("w", 0), 8, 8, -1.0, 1.0);
        let (y, _) = noisy_matmul(
            &x,
            &w,
            &OpticalConfig::default(),
            &NoiseParams::noiseless(),
            &ctx.child(labels::CHIP, 0),
        )
        .unwrap();
        assert!(rel_frobenius(&y, &exact(&x, &w)) <= 1e-9);
    }

    #[test]
    fn noiseless_exact_across_tile_boundaries() {
        let ctx = SeedContext::new(32);
        for (t, (m, k, n)) in [(2, 33, 65), (1, 64, 64), (3, 100, 130), (2, 31, 1)]
            .iter()
            .enumerate()
        {
            let x = Matrix::random_uniform(&ctx.child("x", t as u64), *m, *k, -3.0, 3.0);
            let w = Matrix::random_uniform(&ctx.child("w", t as u64), *k, *n, -2.5, 2.5);
            let (y, _) = noisy_matmul(
                &x,
                &w,
                &OpticalConfig::default(),
                &NoiseParams::noiseless(),
                &ctx.child(labels::CHIP, 0),
            )
            .unwrap();
            assert!(rel_frobenius(&y, &exact(&x, &w)) <= 1e-9, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn deterministic_across_calls() {
        let ctx = SeedContext::new(33);
        let x = Matrix::random_uniform(&ctx.child("x", 0), 4, 40, -1.0, 1.0);
        let w = Matrix::random_uniform(&ctx.child("w", 0), 40, 70, -1.0, 1.0);
        let params = NoiseParams::pre_trim(0.2, 0.1, 0.05);
        let chip = ctx.child(labels::CHIP, 0).child(labels::PASS, 3);
        let (a, _) = noisy_matmul(&x, &w, &OpticalConfig::default(), &params, &chip).unwrap();
        let (b, _) = noisy_matmul(&x, &w, &OpticalConfig::default(), &params, &chip).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fabrication_frozen_per_chip_across_passes() {
        let ctx = SeedContext::new(34);
        let x = Matrix::random_uniform(&ctx.child("x", 0), 2, 16, -1.0, 1.0);
        let w = Matrix::random_uniform(&ctx.child("w", 0), 16, 8, -1.0, 1.0);
        let params = NoiseParams::pre_trim(0.3, 0.0, 0.0);
        let chip = ctx.child(labels::CHIP, 5);
        let (a, _) =
            noisy_matmul(&x, &w, &OpticalConfig::default(), &params, &chip.child(labels::PASS, 0))
                .unwrap();
        let (b, _) =
            noisy_matmul(&x, &w, &OpticalConfig::default(), &params, &chip.child(labels::PASS, 1))
                .unwrap();
        // Only fabrication noise is on, so two passes see identical weights.
        assert_eq!(a.data(), b.data());

        let params_t = NoiseParams::pre_trim(0.0, 0.1, 0.0);
        let (c, _) = noisy_matmul(
            &x,
            &w,
            &OpticalConfig::default(),
            &params_t,
            &chip.child(labels::PASS, 0),
        )
        .unwrap();
        let (d, _) = noisy_matmul(
            &x,
            &w,
            &OpticalConfig::default(),
            &params_t,
            &chip.child(labels::PASS, 1),
        )
        .unwrap();
        assert_ne!(c.data(), d.data());
    }

    #[test]
    fn single_mac_variance_matches_formula() {
        let ctx = SeedContext::new(35);
        let params = NoiseParams::pre_trim(0.1, 0.1, 0.05);
        let x = Matrix::from_vec(1, 1, vec![0.8]).unwrap();
        let w = Matrix::from_vec(1, 1, vec![0.6]).unwrap();
        let y_exact = 0.48;
        let trials = 100_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..trials {
            let chip = ctx.child(labels::CHIP, t);
            let (y, _) = noisy_matmul(&x, &w, &OpticalConfig::default(), &params, &chip).unwrap();
            let dy = y.get(0, 0) - y_exact;
            sum += dy;
            sumsq += dy * dy;
        }
        let n = trials as f64;
        let mean = sum / n;
        let var = sumsq / n - mean * mean;
        let expect = crate::noise::mac_variance(&[0.8], &[0.6], &params).unwrap().variance;
        // 3 sigma of the variance estimator is about 1.3% at 1e5 trials.
        assert!((var - expect).abs() / expect < 0.02, "var {var} vs {expect}");
    }

    #[test]
    fn post_trim_zero_bias_error_mean_is_small() {
        let ctx = SeedContext::new(36);
        let params = NoiseParams::post_trim(32.0, 0.0, 0.0, 0.0);
        let x = Matrix::random_uniform(&ctx.child("x", 0), 1, 8, 0.2, 1.0);
        let w = Matrix::random_uniform(&ctx.child("w", 0), 8, 1, -0.8, 0.8);
        let y_exact = exact(&x, &w).get(0, 0);
        let trials = 20_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..trials {
            let (y, _) = noisy_matmul(
                &x,
                &w,
                &OpticalConfig::default(),
                &params,
                &ctx.child(labels::CHIP, t),
            )
            .unwrap();
            let dy = y.get(0, 0) - y_exact;
            sum += dy;
            sumsq += dy * dy;
        }
        let n = trials as f64;
        let mean = sum / n;
        let std = (sumsq / n - mean * mean).sqrt();
        // First-order unbiased; only the second-order Lorentzian curvature
        // (O((sigma_lambda/Gamma)^2) ~ 1e-3) remains.
        assert!(
            mean.abs() < 0.01 * y_exact.abs().max(std),
            "mean {mean}, std {std}, y {y_exact}"
        );
    }

    #[test]
    fn common_mode_laser_is_purely_multiplicative() {
        // Global zeta, all other noise off: every output in a tile sees the
        // same (1 + zeta) factor, so the constant-sum encoding leaves no
        // additive common-mode term.
        let ctx = SeedContext::new(37);
        let x = Matrix::random_uniform(&ctx.child("x", 0), 1, 32, -1.0, 1.0);
        let w = Matrix::random_uniform(&ctx.child("w", 0), 32, 64, -1.0, 1.0);
        let mut params = NoiseParams::pre_trim(0.0, 0.0, 0.2);
        params.laser_mode = LaserMode::GlobalPerCycle;
        let (y, s) =
            noisy_matmul(&x, &w, &OpticalConfig::default(), &params, &ctx.child(labels::CHIP, 0))
                .unwrap();
        assert_eq!(s.tiles.len(), 1);
        let y0 = exact(&x, &w);
        // Fit the single multiplicative factor and check nothing is left
        // beyond LUT quantization.
        let c = y.data().iter().zip(y0.data()).map(|(a, b)| a * b).sum::<f64>()
            / y0.data().iter().map(|b| b * b).sum::<f64>();
        assert!((c - 1.0).abs() > 1e-6, "zeta should be nonzero");
        let resid = y.sub(&y0.scale(c)).unwrap().frobenius_norm();
        assert!(resid / y.frobenius_norm() < 1e-8, "common-mode residual {resid}");
    }

    #[test]
    fn schedule_serializes_to_json() {
        let s = build_schedule(2, 40, 70, CoreGeometry::default()).unwrap();
        let j = s.to_json().unwrap();
        assert!(j.contains("\"row_tiles\": 2"));
        assert!(j.contains("\"col_tiles\": 2"));
    }
}
