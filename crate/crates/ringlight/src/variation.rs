//! Spatially correlated resonance-shift maps.
//!
//! The map is a zero-mean Gaussian random field with squared-exponential
//! covariance `amplitude^2 * exp(-r^2 / (2 l_w^2))`, built by convolving
//! unit white noise with a Gaussian kernel of width `l_w / sqrt(2)` (the
//! autocorrelation of that kernel is exactly the squared exponential).
//! The kernel is normalized so the marginal std equals `amplitude_nm`.

use std::io::Write;

use crate::math::rng::SeedContext;
use crate::{Error, Result};

/// 2-D field of resonance shifts (nm) on a square-cell grid.
#[derive(Debug, Clone)]
pub struct VariationMap {
    grid: Vec<f64>,
    rows: usize,
    cols: usize,
    pub cell_size_mm: f64,
    pub correlation_length_mm: f64,
    pub amplitude_nm: f64,
}

impl VariationMap {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.cols + col]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        for i in 0..self.rows {
            let line: Vec<String> =
                (0..self.cols).map(|j| format!("{}", self.get(i, j))).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Generate a variation map covering `width_mm x height_mm`.
pub fn generate_variation_map(
    ctx: &SeedContext,
    width_mm: f64,
    height_mm: f64,
    cell_mm: f64,
    l_w_mm: f64,
    amplitude_nm: f64,
) -> Result<VariationMap> {
    if !(width_mm > 0.0 && height_mm > 0.0 && cell_mm > 0.0) {
        return Err(Error::Param("variation map dimensions must be positive".into()));
    }
    if !(l_w_mm > 0.0) {
        return Err(Error::Param(format!("correlation length must be > 0, got {l_w_mm}")));
    }
    if !(amplitude_nm >= 0.0) {
        return Err(Error::Param(format!("amplitude must be >= 0, got {amplitude_nm}")));
    }
    let cols = (width_mm / cell_mm).round().max(1.0) as usize;
    let rows = (height_mm / cell_mm).round().max(1.0) as usize;

    // Discrete Gaussian kernel, truncated at 4 sigma.
    let sigma_cells = (l_w_mm / std::f64::consts::SQRT_2) / cell_mm;
    let radius = (4.0 * sigma_cells).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma_cells * sigma_cells)).exp()
        })
        .collect();
    // Separable 2-D kernel energy = (sum of squares)^2 for the 1-D kernel;
    // dividing by it makes the filtered field unit-variance.
    let energy_1d: f64 = kernel.iter().map(|k| k * k).sum();
    let gain = amplitude_nm / energy_1d.max(1e-300);

    // White noise on a grid padded by the kernel radius, then two 1-D passes.
    let prows = rows + 2 * radius;
    let pcols = cols + 2 * radius;
    let s = ctx.stream();
    let mut white: Vec<f64> = (0..prows * pcols).map(|i| s.std_normal_at(i as u64)).collect();
    if amplitude_nm == 0.0 {
        white.iter_mut().for_each(|v| *v = 0.0);
    }

    // Horizontal pass (valid in x), then vertical pass (valid in y).
    let hcols = cols;
    let mut horiz = vec![0.0; prows * hcols];
    for r in 0..prows {
        for c in 0..hcols {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * white[r * pcols + c + k];
            }
            horiz[r * hcols + c] = acc;
        }
    }
    let mut grid = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(r + k) * hcols + c];
            }
            grid[r * cols + c] = acc * gain;
        }
    }

    Ok(VariationMap {
        grid,
        rows,
        cols,
        cell_size_mm: cell_mm,
        correlation_length_mm: l_w_mm,
        amplitude_nm,
    })
}

/// Shifts read for one bank placement plus its spread estimate.
#[derive(Debug, Clone)]
pub struct BankSample {
    pub origin: (usize, usize),
    pub shifts_nm: Vec<f64>,
    /// Sample std of this bank's shifts.
    pub sigma_b_nm: f64,
}

/// Place a bank of `n_rings` adjacent cells (one row) at `placements` random
/// locations and read the shifts under each ring.
pub fn sample_bank_shifts(
    map: &VariationMap,
    ctx: &SeedContext,
    n_rings: usize,
    placements: usize,
) -> Result<Vec<BankSample>> {
    if n_rings == 0 || placements == 0 {
        return Err(Error::Param("bank sampling needs n_rings > 0 and placements > 0".into()));
    }
    if n_rings > map.cols() {
        return Err(Error::Shape(format!(
            "bank of {n_rings} rings does not fit a {}-column map",
            map.cols()
        )));
    }
    let s = ctx.stream();
    let mut out = Vec::with_capacity(placements);
    for p in 0..placements {
        let row = s.index_at(2 * p as u64, map.rows() as u64) as usize;
        let col = s.index_at(2 * p as u64 + 1, (map.cols() - n_rings + 1) as u64) as usize;
        let shifts: Vec<f64> = (0..n_rings).map(|i| map.get(row, col + i)).collect();
        let n = shifts.len() as f64;
        let mean = shifts.iter().sum::<f64>() / n;
        let var = if shifts.len() > 1 {
            shifts.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.push(BankSample { origin: (row, col), shifts_nm: shifts, sigma_b_nm: var.sqrt() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let m = generate_variation_map(&SeedContext::new(1), 5.0, 5.0, 0.25, 1.0, 0.0).unwrap();
        assert!(m.grid().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn default_geometry_shape() {
        let m = generate_variation_map(&SeedContext::new(2), 10.0, 10.0, 0.1, 1.0, 0.5).unwrap();
        assert_eq!(m.rows(), 100);
        assert_eq!(m.cols(), 100);
    }

    #[test]
    fn marginal_std_matches_amplitude() {
        // Correlation shrinks the effective sample count: with l_w = 0.5 mm
        // each 6x6 mm field carries ~23 independent patches, so 300 fields
        // put the estimator's sigma near 0.9%.
        let base = SeedContext::new(3);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut n = 0.0;
        for f in 0..300u64 {
            let m =
                generate_variation_map(&base.child("field", f), 6.0, 6.0, 0.2, 0.5, 0.8).unwrap();
            for v in m.grid() {
                sum += v;
                sumsq += v * v;
                n += 1.0;
            }
        }
        let var = sumsq / n - (sum / n) * (sum / n);
        let std = var.sqrt();
        assert!((std - 0.8).abs() / 0.8 < 0.03, "field std {std}");
    }

    #[test]
    fn autocorrelation_at_correlation_length() {
        // E[f(x) f(x + l_w)] should be about exp(-1/2) * variance.
        let base = SeedContext::new(4);
        let l_w = 1.0f64;
        let cell = 0.25f64;
        let lag = (l_w / cell).round() as usize;
        let mut num = 0.0;
        let mut num_count = 0.0;
        let mut den = 0.0;
        let mut den_count = 0.0;
        for f in 0..200u64 {
            let m =
                generate_variation_map(&base.child("field", f), 8.0, 8.0, cell, l_w, 1.0).unwrap();
            for r in 0..m.rows() {
                for c in 0..m.cols() - lag {
                    num += m.get(r, c) * m.get(r, c + lag);
                    num_count += 1.0;
                }
                for c in 0..m.cols() {
                    den += m.get(r, c) * m.get(r, c);
                    den_count += 1.0;
                }
            }
        }
        let ratio = (num / num_count) / (den / den_count);
        let expect = (-0.5f64).exp();
        assert!(
            (ratio - expect).abs() < 0.05,
            "autocorrelation ratio {ratio} vs {expect}"
        );
    }

    #[test]
    fn zero_map_gives_zero_shifts() {
        let m = generate_variation_map(&SeedContext::new(5), 4.0, 4.0, 0.2, 1.0, 0.0).unwrap();
        let banks = sample_bank_shifts(&m, &SeedContext::new(6), 15, 10).unwrap();
        for b in banks {
            assert!(b.shifts_nm.iter().all(|v| *v == 0.0));
            assert_eq!(b.sigma_b_nm, 0.0);
        }
    }

    #[test]
    fn bank_sampling_shape_contract() {
        let m = generate_variation_map(&SeedContext::new(7), 10.0, 10.0, 0.1, 1.0, 0.5).unwrap();
        let banks = sample_bank_shifts(&m, &SeedContext::new(8), 15, 100).unwrap();
        assert_eq!(banks.len(), 100);
        assert!(banks.iter().all(|b| b.shifts_nm.len() == 15));
    }

    #[test]
    fn sigma_b_is_sample_std_of_shifts() {
        let m = generate_variation_map(&SeedContext::new(9), 6.0, 6.0, 0.2, 0.5, 1.0).unwrap();
        let banks = sample_bank_shifts(&m, &SeedContext::new(10), 15, 5).unwrap();
        for b in banks {
            let n = b.shifts_nm.len() as f64;
            let mean = b.shifts_nm.iter().sum::<f64>() / n;
            let var =
                b.shifts_nm.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            assert!((b.sigma_b_nm - var.sqrt()).abs() < 1e-12);
        }
    }
}
