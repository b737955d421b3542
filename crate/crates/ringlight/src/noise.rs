//! The three multiplicative noise sources of the MR accelerator and the
//! closed-form MAC output variance.
//!
//! Weights are perturbed as `w * (1 + eps + eta)` with a static fabrication
//! term `eps ~ N(0, sigma_fab^2)` frozen per chip and a thermal term
//! `eta ~ N(0, sigma_thermal^2)` redrawn per forward pass. Inputs are
//! perturbed as `x * (1 + zeta)` with `zeta ~ N(0, sigma_laser^2)` redrawn
//! per cycle, either per wavelength channel or globally.

use serde::{Deserialize, Serialize};

use crate::math::rng::{labels, SeedContext};
use crate::{Error, Result};

/// Trim state of the modeled array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrimRegime {
    /// No wafer-scale trimming: fabrication shifts of order the linewidth,
    /// modeled as a large multiplicative std on the signed weight.
    PreTrim,
    /// Wafer-trimmed: residual detuning jitter `N(mu_r, sigma_lambda^2)` in
    /// picometers is applied directly to the programmed detunings.
    PostTrim,
}

/// Whether the laser term is drawn per wavelength channel or once per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LaserMode {
    PerChannel,
    GlobalPerCycle,
}

/// Noise configuration driving every stochastic draw in the emulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_fab: f64,
    pub sigma_thermal: f64,
    pub sigma_laser: f64,
    pub regime: TrimRegime,
    /// Post-trim residual jitter std, picometers.
    pub jitter_std_pm: f64,
    /// Post-trim systematic bias mu_r, picometers.
    pub jitter_bias_pm: f64,
    /// FWHM linewidth Gamma, nanometers.
    pub linewidth_nm: f64,
    pub laser_mode: LaserMode,
}

impl NoiseParams {
    /// Pre-trim parameterization: explicit relative stds for all three sources.
    pub fn pre_trim(sigma_fab: f64, sigma_thermal: f64, sigma_laser: f64) -> Self {
        Self {
            sigma_fab,
            sigma_thermal,
            sigma_laser,
            regime: TrimRegime::PreTrim,
            jitter_std_pm: 0.0,
            jitter_bias_pm: 0.0,
            linewidth_nm: 1.2,
            laser_mode: LaserMode::PerChannel,
        }
    }

    /// Post-trim parameterization: residual jitter in picometers plus the
    /// thermal and laser stds.
    pub fn post_trim(
        jitter_std_pm: f64,
        jitter_bias_pm: f64,
        sigma_thermal: f64,
        sigma_laser: f64,
    ) -> Self {
        Self {
            sigma_fab: 0.0,
            sigma_thermal,
            sigma_laser,
            regime: TrimRegime::PostTrim,
            jitter_std_pm,
            jitter_bias_pm,
            linewidth_nm: 1.2,
            laser_mode: LaserMode::PerChannel,
        }
    }

    /// Worst-case untrimmed array: sigma_fab = 0.8.
    pub fn pre_trim_default() -> Self {
        Self::pre_trim(0.8, 0.0, 0.0)
    }

    /// Measured post-trim residual: 32 pm jitter, zero bias.
    pub fn post_trim_default() -> Self {
        Self::post_trim(32.0, 0.0, 0.0, 0.0)
    }

    pub fn noiseless() -> Self {
        Self::pre_trim(0.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_fab", self.sigma_fab),
            ("sigma_thermal", self.sigma_thermal),
            ("sigma_laser", self.sigma_laser),
            ("jitter_std_pm", self.jitter_std_pm),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Param(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.linewidth_nm > 0.0) {
            return Err(Error::Param(format!(
                "linewidth_nm must be > 0, got {}",
                self.linewidth_nm
            )));
        }
        if self.regime == TrimRegime::PostTrim && self.jitter_std_pm > 100.0 {
            return Err(Error::Param(format!(
                "post-trim jitter_std_pm must be in [0, 100], got {}",
                self.jitter_std_pm
            )));
        }
        Ok(())
    }

    /// Fabrication std entering the MAC variance law: the configured
    /// sigma_fab pre-trim, or the normalized residual jitter sigma_lambda /
    /// Gamma post-trim.
    pub fn effective_sigma_fab(&self) -> f64 {
        match self.regime {
            TrimRegime::PreTrim => self.sigma_fab,
            TrimRegime::PostTrim => sigma_fab_from_jitter(self.jitter_std_pm, self.linewidth_nm),
        }
    }

    /// Sum of the three variances, the per-term factor of the MAC law.
    pub fn variance_sum(&self) -> f64 {
        let f = self.effective_sigma_fab();
        f * f + self.sigma_thermal * self.sigma_thermal + self.sigma_laser * self.sigma_laser
    }

    pub fn is_noiseless(&self) -> bool {
        self.effective_sigma_fab() == 0.0
            && self.sigma_thermal == 0.0
            && self.sigma_laser == 0.0
            && (self.regime == TrimRegime::PreTrim || self.jitter_bias_pm == 0.0)
    }
}

/// Normalized resonance spread `sigma_lambda / Gamma` in consistent units.
pub fn sigma_fab_from_jitter(sigma_lambda_pm: f64, linewidth_nm: f64) -> f64 {
    (sigma_lambda_pm / 1000.0) / linewidth_nm
}

/// One realization of all three sources for a weight block and input block.
///
/// Stored values are the deviations; multipliers are `1 + eps + eta` per
/// weight and `1 + zeta` per input element.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Path of the context the draw was made from.
    pub provenance: SeedContext,
}

impl NoiseDraw {
    #[inline]
    pub fn weight_multiplier(&self, idx: usize) -> f64 {
        1.0 + self.eps[idx] + self.eta[idx]
    }

    #[inline]
    pub fn input_multiplier(&self, idx: usize) -> f64 {
        1.0 + self.zeta[idx]
    }
}

/// Draw eps/eta/zeta for a `weight_len` weight block and `input_len` input
/// block.
///
/// Stream cadence: eps ignores the pass, cycle, and trial components of the
/// path (frozen with the chip); eta ignores the cycle component (redrawn per
/// pass); zeta uses the full path (redrawn per cycle). With
/// `LaserMode::GlobalPerCycle` all zeta entries share draw 0.
pub fn draw_noise(
    params: &NoiseParams,
    ctx: &SeedContext,
    weight_len: usize,
    input_len: usize,
) -> Result<NoiseDraw> {
    params.validate()?;
    let fab = ctx.strip(&[labels::PASS, labels::CYCLE]).child(labels::FAB, 0);
    let thermal = ctx.strip(&[labels::CYCLE]).child(labels::THERMAL, 0);
    let laser = ctx.child(labels::LASER, 0);

    let eps = fab.gauss(weight_len, 0.0, params.effective_sigma_fab())?;
    let eta = thermal.gauss(weight_len, 0.0, params.sigma_thermal)?;
    let zeta = match params.laser_mode {
        LaserMode::PerChannel => laser.gauss(input_len, 0.0, params.sigma_laser)?,
        LaserMode::GlobalPerCycle => {
            let z = laser.stream().normal_at(0, 0.0, params.sigma_laser);
            vec![z; input_len]
        }
    };
    Ok(NoiseDraw { eps, eta, zeta, provenance: ctx.clone() })
}

/// Output of the closed-form MAC variance law.
#[derive(Debug, Clone, Copy)]
pub struct MacVariance {
    /// Var(dY) = sum_i x_i^2 w_i^2 (sigma_laser^2 + sigma_fab^2 + sigma_thermal^2)
    pub variance: f64,
    /// sqrt(Var) / |sum_i x_i w_i|; None when the dot product is zero.
    pub relative_std: Option<f64>,
}

/// Closed-form output variance of a noisy MAC over equal-length x and w.
pub fn mac_variance(x: &[f64], w: &[f64], params: &NoiseParams) -> Result<MacVariance> {
    if x.len() != w.len() {
        return Err(Error::Shape(format!("mac_variance: {} vs {}", x.len(), w.len())));
    }
    params.validate()?;
    let s = params.variance_sum();
    let variance: f64 = x.iter().zip(w).map(|(xi, wi)| xi * xi * wi * wi * s).sum();
    let dot: f64 = x.iter().zip(w).map(|(xi, wi)| xi * wi).sum();
    let relative_std = if dot == 0.0 { None } else { Some(variance.sqrt() / dot.abs()) };
    Ok(MacVariance { variance, relative_std })
}
