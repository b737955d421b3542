//! Chance-constrained margin training and noise-aware LayerNorm.
//!
//! The CCT penalty hinges the variance-normalized attention margin against
//! the confidence target: `[z_tau - (s_top - s_j) / sqrt(v_top + v_j)]_+`,
//! summed over each row's adversarial competitor set and divided by the
//! total number of hinge terms. NALN normalizes by
//! `sqrt(max(var - sigma_n^2, 0) + eps)`, subtracting the expected device
//! noise variance from the empirical activation variance before scaling.

use serde::{Deserialize, Serialize};

use crate::math::matrix::Matrix;
use crate::math::normal::std_normal_quantile;
use crate::noise::{mac_variance, NoiseParams};
use crate::proxy::{competitor_set, LogitVarianceMap};
use crate::{Error, Result};

/// Guard added under the square root so the noiseless limit stays finite.
pub const MARGIN_VARIANCE_GUARD: f64 = 1e-12;

/// Which encoder blocks the CCT penalty applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    /// Early global + late refinement: the first and last blocks.
    FirstLast,
    All,
    Indices(Vec<usize>),
}

impl LayerSelection {
    pub fn contains(&self, layer: usize, n_layers: usize) -> bool {
        match self {
            LayerSelection::FirstLast => layer == 0 || layer + 1 == n_layers,
            LayerSelection::All => true,
            LayerSelection::Indices(v) => v.contains(&layer),
        }
    }
}

/// Which attention heads the CCT penalty applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSelection {
    All,
    Indices(Vec<usize>),
}

impl HeadSelection {
    pub fn contains(&self, head: usize) -> bool {
        match self {
            HeadSelection::All => true,
            HeadSelection::Indices(v) => v.contains(&head),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CCTConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_epochs: usize,
    /// Competitor-set size K.
    pub k_competitors: usize,
    pub lambda: f64,
    pub active_layers: LayerSelection,
    pub active_heads: HeadSelection,
}

impl Default for CCTConfig {
    fn default() -> Self {
        Self {
            tau_start: 0.80,
            tau_end: 0.95,
            anneal_epochs: 10,
            k_competitors: 4,
            lambda: 0.1,
            active_layers: LayerSelection::FirstLast,
            active_heads: HeadSelection::All,
        }
    }
}

impl CCTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_start > 0.0 && self.tau_start <= self.tau_end && self.tau_end < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < tau_start <= tau_end < 1, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.k_competitors == 0 {
            return Err(Error::Param("k_competitors must be >= 1".into()));
        }
        Ok(())
    }
}

/// Curriculum position: linear interpolation of tau over the anneal window,
/// constant afterwards. Returns `(tau, z_tau)`.
pub fn tau_schedule(cfg: &CCTConfig, epoch: usize) -> Result<(f64, f64)> {
    cfg.validate()?;
    let frac = if cfg.anneal_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / cfg.anneal_epochs as f64).min(1.0)
    };
    let tau = cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac;
    Ok((tau, std_normal_quantile(tau)?))
}

/// CCT hinge loss over one attention map, with gradients.
#[derive(Debug, Clone)]
pub struct CctLoss {
    /// Sum of hinge terms divided by the number of terms.
    pub loss: f64,
    /// Unnormalized hinge sum, for aggregation across heads and layers.
    pub hinge_sum: f64,
    /// Number of hinge terms summed (rows x competitor-set sizes).
    pub hinge_count: usize,
    /// d loss / d logits (normalized by the local count).
    pub d_logits: Matrix,
    /// d loss / d variances (normalized by the local count).
    pub d_variances: Matrix,
    /// Gradients of the unnormalized hinge sum, for global-B aggregation.
    pub d_logits_raw: Matrix,
    pub d_variances_raw: Matrix,
}

/// Hinge surrogate of the chance constraint for a T x U logit map.
pub fn cct_loss(
    logits: &Matrix,
    variances: &LogitVarianceMap,
    cfg: &CCTConfig,
    epoch: usize,
) -> Result<CctLoss> {
    if logits.cols() < 2 {
        return Err(Error::Param("cct_loss needs at least 2 keys per row".into()));
    }
    if logits.rows() != variances.v.rows() || logits.cols() != variances.v.cols() {
        return Err(Error::Shape("logits and variance map must share a shape".into()));
    }
    let (_, z_tau) = tau_schedule(cfg, epoch)?;

    let mut hinge_sum = 0.0;
    let mut hinge_count = 0usize;
    let mut d_logits_raw = Matrix::zeros(logits.rows(), logits.cols());
    let mut d_variances_raw = Matrix::zeros(logits.rows(), logits.cols());

    for t in 0..logits.rows() {
        let top = variances.top1[t];
        let competitors = competitor_set(logits.row(t), variances.v.row(t), cfg.k_competitors)?;
        for j in competitors {
            hinge_count += 1;
            let margin = logits.get(t, top) - logits.get(t, j);
            let var = variances.pairwise_sigma_sq(t, j) + MARGIN_VARIANCE_GUARD;
            let sigma = var.sqrt();
            let h = z_tau - margin / sigma;
            if h > 0.0 {
                hinge_sum += h;
                // d h / d margin = -1/sigma; d h / d var = margin / (2 sigma^3)
                let dm = -1.0 / sigma;
                d_logits_raw.set(t, top, d_logits_raw.get(t, top) + dm);
                d_logits_raw.set(t, j, d_logits_raw.get(t, j) - dm);
                let dv = margin / (2.0 * sigma * var);
                d_variances_raw.set(t, top, d_variances_raw.get(t, top) + dv);
                d_variances_raw.set(t, j, d_variances_raw.get(t, j) + dv);
            }
        }
    }

    let b = hinge_count.max(1) as f64;
    Ok(CctLoss {
        loss: hinge_sum / b,
        hinge_sum,
        hinge_count,
        d_logits: d_logits_raw.scale(1.0 / b),
        d_variances: d_variances_raw.scale(1.0 / b),
        d_logits_raw,
        d_variances_raw,
    })
}

/// Noise-aware LayerNorm parameters for one normalization site.
#[derive(Debug, Clone)]
pub struct NALNConfig {
    /// Expected device-noise variance on the incoming activations.
    pub sigma_n_sq: f64,
    pub eps: f64,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NALNConfig {
    pub fn unit(d: usize, sigma_n_sq: f64) -> Self {
        Self { sigma_n_sq, eps: 1e-5, gain: vec![1.0; d], bias: vec![0.0; d] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_n_sq >= 0.0) {
            return Err(Error::Param(format!(
                "sigma_n_sq must be >= 0, got {}",
                self.sigma_n_sq
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Param(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub struct NalnCache {
    pub x_hat: Vec<f64>,
    pub denom: f64,
    /// True when `var - sigma_n^2` clamped at zero; the clamped branch
    /// carries zero subgradient through the variance.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct NalnOutput {
    pub y: Vec<f64>,
    pub cache: NalnCache,
}

/// `y = gain * (x - mean) / sqrt(max(var - sigma_n^2, 0) + eps) + bias`.
pub fn naln_forward(x: &[f64], cfg: &NALNConfig) -> Result<NalnOutput> {
    cfg.validate()?;
    let d = x.len();
    if d < 2 {
        return Err(Error::Param("naln_forward needs d >= 2".into()));
    }
    if cfg.gain.len() != d || cfg.bias.len() != d {
        return Err(Error::Shape(format!(
            "gain/bias of {} and {} for d = {d}",
            cfg.gain.len(),
            cfg.bias.len()
        )));
    }
    let n = d as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let corrected = var - cfg.sigma_n_sq;
    let clamped = corrected <= 0.0;
    let denom = (corrected.max(0.0) + cfg.eps).sqrt();
    let x_hat: Vec<f64> = x.iter().map(|v| (v - mean) / denom).collect();
    let y: Vec<f64> =
        x_hat.iter().zip(&cfg.gain).zip(&cfg.bias).map(|((h, g), b)| g * h + b).collect();
    Ok(NalnOutput { y, cache: NalnCache { x_hat, denom, clamped } })
}

#[derive(Debug, Clone)]
pub struct NalnGrads {
    pub dx: Vec<f64>,
    pub dgain: Vec<f64>,
    pub dbias: Vec<f64>,
}

/// Chain rule through the clamped denominator.
///
/// With `g = upstream * gain` and `D` the forward denominator:
/// `dx = (g - mean(g) - 1[not clamped] * x_hat * mean(g * x_hat)) / D`.
pub fn naln_backward(upstream: &[f64], cfg: &NALNConfig, cache: &NalnCache) -> Result<NalnGrads> {
    let d = upstream.len();
    if d != cache.x_hat.len() || cfg.gain.len() != d {
        return Err(Error::Shape("naln_backward shape mismatch".into()));
    }
    let n = d as f64;
    let g: Vec<f64> = upstream.iter().zip(&cfg.gain).map(|(u, gn)| u * gn).collect();
    let g_mean = g.iter().sum::<f64>() / n;
    let gx_mean = g.iter().zip(&cache.x_hat).map(|(a, b)| a * b).sum::<f64>() / n;
    let var_term = if cache.clamped { 0.0 } else { 1.0 };
    let dx = (0..d)
        .map(|i| (g[i] - g_mean - var_term * cache.x_hat[i] * gx_mean) / cache.denom)
        .collect();
    let dgain = upstream.iter().zip(&cache.x_hat).map(|(u, h)| u * h).collect();
    let dbias = upstream.to_vec();
    Ok(NalnGrads { dx, dgain, dbias })
}

/// Noise-variance proxy of one linear layer: the mean over output channels
/// of the MAC variance law applied to the running input RMS and the
/// channel's weight column.
pub fn sigma_n_proxy_for_layer(
    input_rms: &[f64],
    weights: &Matrix,
    params: &NoiseParams,
) -> Result<f64> {
    if weights.rows() != input_rms.len() {
        return Err(Error::Shape(format!(
            "input rms of {} vs weights {}x{}",
            input_rms.len(),
            weights.rows(),
            weights.cols()
        )));
    }
    if weights.cols() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut col = vec![0.0; weights.rows()];
    for j in 0..weights.cols() {
        for i in 0..weights.rows() {
            col[i] = weights.get(i, j);
        }
        total += mac_variance(input_rms, &col, params)?.variance;
    }
    Ok(total / weights.cols() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::SeedContext;

    fn cfg_fixed_tau(tau: f64) -> CCTConfig {
        CCTConfig { tau_start: tau, tau_end: tau, anneal_epochs: 0, ..Default::default() }
    }

    fn vmap(logits: &Matrix, v: Vec<f64>) -> LogitVarianceMap {
        let vm = Matrix::from_vec(logits.rows(), logits.cols(), v).unwrap();
        LogitVarianceMap::new(logits, vm).unwrap()
    }

    #[test]
    fn hinge_inactive_for_wide_margin() {
        // m / sigma = 1 / sqrt(0.02) ~ 7.07 > 1.645.
        let logits = Matrix::from_vec(1, 2, vec![2.0, 1.0]).unwrap();
        let map = vmap(&logits, vec![0.01, 0.01]);
        let out = cct_loss(&logits, &map, &cfg_fixed_tau(0.95), 0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.d_logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hinge_active_scalar_case() {
        // m / sigma = 0.1 / 0.2 = 0.5, hinge = z_0.95 - 0.5 ~ 1.145.
        let logits = Matrix::from_vec(1, 2, vec![1.0, 0.9]).unwrap();
        let map = vmap(&logits, vec![0.02, 0.02]);
        let out = cct_loss(&logits, &map, &cfg_fixed_tau(0.95), 0).unwrap();
        assert_eq!(out.hinge_count, 1);
        assert!((out.loss - 1.145).abs() < 1e-3, "loss {}", out.loss);
    }

    #[test]
    fn zero_variance_positive_margin_saturates() {
        let logits = Matrix::from_vec(1, 3, vec![1.0, 0.5, 0.0]).unwrap();
        let map = vmap(&logits, vec![0.0, 0.0, 0.0]);
        let out = cct_loss(&logits, &map, &cfg_fixed_tau(0.95), 0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn all_equal_logits_still_defined() {
        let logits = Matrix::from_vec(1, 3, vec![0.7, 0.7, 0.7]).unwrap();
        let map = vmap(&logits, vec![0.01, 0.01, 0.01]);
        assert_eq!(map.top1, vec![0]);
        let out = cct_loss(&logits, &map, &cfg_fixed_tau(0.95), 0).unwrap();
        // Zero margins leave the full z_tau hinge on every competitor.
        assert!((out.loss - 1.645).abs() < 1e-3);
    }

    #[test]
    fn shift_invariance() {
        let logits = Matrix::from_vec(1, 4, vec![1.2, 0.8, 0.3, 1.0]).unwrap();
        let v = vec![0.05, 0.02, 0.01, 0.04];
        let a = cct_loss(&logits, &vmap(&logits, v.clone()), &cfg_fixed_tau(0.9), 0).unwrap();
        let shifted = Matrix::from_vec(1, 4, vec![11.2, 10.8, 10.3, 11.0]).unwrap();
        let b = cct_loss(&shifted, &vmap(&shifted, v), &cfg_fixed_tau(0.9), 0).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn monotone_nonincreasing_in_margin() {
        let v = vec![0.05, 0.05, 0.05];
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let top = 0.5 + 0.2 * i as f64;
            let logits = Matrix::from_vec(1, 3, vec![top, 0.4, 0.3]).unwrap();
            let out =
                cct_loss(&logits, &vmap(&logits, v.clone()), &cfg_fixed_tau(0.95), 0).unwrap();
            assert!(out.loss <= prev + 1e-15);
            prev = out.loss;
        }
    }

    #[test]
    fn tau_schedule_endpoints_and_midpoint() {
        let cfg = CCTConfig { anneal_epochs: 10, ..Default::default() };
        let (tau0, z0) = tau_schedule(&cfg, 0).unwrap();
        assert!((tau0 - 0.80).abs() < 1e-12);
        assert!((z0 - 0.8416).abs() < 1e-3);
        let (tau_end, z_end) = tau_schedule(&cfg, 10).unwrap();
        assert!((tau_end - 0.95).abs() < 1e-12);
        assert!((z_end - 1.6449).abs() < 1e-3);
        let (tau_mid, _) = tau_schedule(&cfg, 5).unwrap();
        assert!((tau_mid - 0.875).abs() < 1e-12);
        let (tau_late, _) = tau_schedule(&cfg, 50).unwrap();
        assert!((tau_late - 0.95).abs() < 1e-12);
    }

    #[test]
    fn cct_gradients_match_finite_differences() {
        let ctx = SeedContext::new(12);
        let cfg = CCTConfig { k_competitors: 3, ..cfg_fixed_tau(0.9) };
        for inst in 0..20u64 {
            let t = 3;
            let u = 5;
            let logits = Matrix::random_normal(&ctx.child("s", inst), t, u, 0.0, 1.0);
            let vraw = Matrix::random_uniform(&ctx.child("v", inst), t, u, 0.001, 0.05);
            let map = LogitVarianceMap::new(&logits, vraw.clone()).unwrap();
            let out = cct_loss(&logits, &map, &cfg, 0).unwrap();
            if out.hinge_count == 0 {
                continue;
            }
            let h = 1e-6;
            for idx in 0..t * u {
                let (r, c) = (idx / u, idx % u);
                // Skip perturbations close enough to an argmax tie to flip
                // a branch under the fd step.
                let row = logits.row(r);
                let top = map.top1[r];
                let gap = row
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != top)
                    .map(|(_, v)| row[top] - v)
                    .fold(f64::INFINITY, f64::min);
                if gap < 10.0 * h {
                    continue;
                }
                let fd = {
                    let mut lp = logits.clone();
                    lp.set(r, c, lp.get(r, c) + h);
                    let mp = LogitVarianceMap::new(&lp, vraw.clone()).unwrap();
                    let fp = cct_loss(&lp, &mp, &cfg, 0).unwrap().hinge_sum;
                    let mut lm = logits.clone();
                    lm.set(r, c, lm.get(r, c) - h);
                    let mm = LogitVarianceMap::new(&lm, vraw.clone()).unwrap();
                    let fm = cct_loss(&lm, &mm, &cfg, 0).unwrap().hinge_sum;
                    (fp - fm) / (2.0 * h)
                };
                let an = out.d_logits_raw.get(r, c);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "inst {inst} d_logits[{r},{c}] fd {fd} vs {an}"
                );
            }
            for idx in 0..t * u {
                let (r, c) = (idx / u, idx % u);
                let fd = {
                    let mut vp = vraw.clone();
                    vp.set(r, c, vp.get(r, c) + h);
                    let mp = LogitVarianceMap::new(&logits, vp).unwrap();
                    let fp = cct_loss(&logits, &mp, &cfg, 0).unwrap().hinge_sum;
                    let mut vm = vraw.clone();
                    vm.set(r, c, vm.get(r, c) - h);
                    let mmm = LogitVarianceMap::new(&logits, vm).unwrap();
                    let fm = cct_loss(&logits, &mmm, &cfg, 0).unwrap().hinge_sum;
                    (fp - fm) / (2.0 * h)
                };
                let an = out.d_variances_raw.get(r, c);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "inst {inst} d_var[{r},{c}] fd {fd} vs {an}"
                );
            }
        }
    }

    fn standard_ln(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        (x.iter().map(|v| (v - mean) / denom).collect(), denom)
    }

    #[test]
    fn naln_reduces_to_layernorm_when_sigma_zero() {
        let ctx = SeedContext::new(13);
        let x: Vec<f64> =
            (0..16).map(|i| ctx.child("x", i).stream().normal_at(0, 0.5, 2.0)).collect();
        let cfg = NALNConfig::unit(16, 0.0);
        let out = naln_forward(&x, &cfg).unwrap();
        let (ln, _) = standard_ln(&x, cfg.eps);
        for (a, b) in out.y.iter().zip(&ln) {
            assert!((a - b).abs() < 1e-12);
        }
        let mean: f64 = out.cache.x_hat.iter().sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn naln_recovers_clean_scale_under_known_noise() {
        let ctx = SeedContext::new(14);
        let d = 512;
        let x: Vec<f64> =
            (0..d).map(|i| ctx.child("x", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let noise: Vec<f64> =
            (0..d).map(|i| ctx.child("n", i as u64).stream().normal_at(0, 0.0, 0.7)).collect();
        let xt: Vec<f64> = x.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let n = d as f64;
        let mean_t = xt.iter().sum::<f64>() / n;
        let var_t = xt.iter().map(|v| (v - mean_t) * (v - mean_t)).sum::<f64>() / n;
        let mean_c = x.iter().sum::<f64>() / n;
        let var_c = x.iter().map(|v| (v - mean_c) * (v - mean_c)).sum::<f64>() / n;

        let cfg = NALNConfig::unit(d, var_t - var_c);
        let out = naln_forward(&xt, &cfg).unwrap();
        // Denominator matches what standard LN would use on the clean x.
        let (_, clean_denom) = standard_ln(&x, cfg.eps);
        assert!((out.cache.denom - clean_denom).abs() < 1e-12);
        // Plain LN on the noisy input over-normalizes: its output variance
        // sits below NALN's.
        let (ln_noisy, _) = standard_ln(&xt, cfg.eps);
        let var_of = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64
        };
        assert!(var_of(&out.y) > var_of(&ln_noisy));
    }

    #[test]
    fn naln_clamp_branch() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let cfg = NALNConfig::unit(4, 100.0);
        let out = naln_forward(&x, &cfg).unwrap();
        assert!(out.cache.clamped);
        assert!((out.cache.denom - cfg.eps.sqrt()).abs() < 1e-15);
        let mean = 2.5;
        for (i, v) in x.iter().enumerate() {
            assert!((out.y[i] - (v - mean) / cfg.eps.sqrt()).abs() < 1e-9);
        }
    }

    /// Independently coded standard LayerNorm backward used as the
    /// sigma_n = 0 reference.
    fn standard_ln_backward(upstream: &[f64], x: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) / denom).collect();
        let gm = upstream.iter().sum::<f64>() / n;
        let gxm = upstream.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        (0..x.len()).map(|i| (upstream[i] - gm - xhat[i] * gxm) / denom).collect()
    }

    #[test]
    fn naln_backward_matches_standard_ln_at_zero_sigma() {
        let ctx = SeedContext::new(15);
        let x: Vec<f64> =
            (0..8).map(|i| ctx.child("x", i).stream().normal_at(0, 0.0, 1.3)).collect();
        let up: Vec<f64> =
            (0..8).map(|i| ctx.child("u", i).stream().normal_at(0, 0.0, 1.0)).collect();
        let cfg = NALNConfig::unit(8, 0.0);
        let out = naln_forward(&x, &cfg).unwrap();
        let grads = naln_backward(&up, &cfg, &out.cache).unwrap();
        let reference = standard_ln_backward(&up, &x, cfg.eps);
        for (a, b) in grads.dx.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn naln_backward_finite_difference_check() {
        let ctx = SeedContext::new(16);
        for (case, sigma_n) in [(0u64, 0.0), (1, 0.3), (2, 100.0)] {
            let d = 8;
            let x: Vec<f64> = (0..d)
                .map(|i| ctx.child("x", case * 100 + i as u64).stream().normal_at(0, 0.1, 1.5))
                .collect();
            let up: Vec<f64> = (0..d)
                .map(|i| ctx.child("u", case * 100 + i as u64).stream().normal_at(0, 0.0, 1.0))
                .collect();
            let mut cfg = NALNConfig::unit(d, sigma_n);
            for i in 0..d {
                cfg.gain[i] = 1.0 + 0.1 * i as f64;
                cfg.bias[i] = 0.05 * i as f64;
            }
            let out = naln_forward(&x, &cfg).unwrap();
            let grads = naln_backward(&up, &cfg, &out.cache).unwrap();
            let loss = |v: &[f64]| -> f64 {
                let o = naln_forward(v, &cfg).unwrap();
                o.y.iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let h = 1e-6;
            for i in 0..d {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                let an = grads.dx[i];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-5, "case {case} dx[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn sigma_n_proxy_zero_params_and_single_mac() {
        let rms = vec![0.9];
        let w = Matrix::from_vec(1, 1, vec![0.7]).unwrap();
        assert_eq!(sigma_n_proxy_for_layer(&rms, &w, &NoiseParams::noiseless()).unwrap(), 0.0);
        let p = NoiseParams::pre_trim(0.1, 0.1, 0.05);
        let direct = mac_variance(&rms, &[0.7], &p).unwrap().variance;
        let proxy = sigma_n_proxy_for_layer(&rms, &w, &p).unwrap();
        assert!((proxy - direct).abs() < 1e-15);
    }
}
