//! Closed-form per-logit variance proxies and pairwise flip statistics.
//!
//! Query/key vectors are routed through microring banks in contiguous
//! slices of `bank_size` (default 15); the final slice is short, which is
//! equivalent to zero padding. Bank statistics enter either as a scalar
//! variance per bank or as a full per-bank covariance.
//!
//! The diagonal proxy is `v = (1/d_k) sum_b sigma_b^2 |q_b|^2 |k_b|^2`;
//! the covariance proxy is `v = (1/d_k) sum_b (q_b . k_b)^T Sigma_b
//! (q_b . k_b)` with `.` elementwise. The two deliberately keep their
//! distinct functional forms (norm product vs quadratic form in the
//! Hadamard product); they do not coincide for Sigma_b = sigma_b^2 I.

use crate::math::matrix::Matrix;
use crate::math::normal::std_normal_cdf;
use crate::{Error, Result};

pub const DEFAULT_BANK_SIZE: usize = 15;

/// Measured statistics of the ring banks a head's vectors traverse.
#[derive(Debug, Clone)]
pub enum BankStats {
    /// One variance per bank.
    Diagonal { sigma_sq: Vec<f64>, bank_size: usize },
    /// One `bank_size x bank_size` PSD covariance per bank.
    Covariance { cov: Vec<Matrix>, bank_size: usize },
}

impl BankStats {
    /// Uniform per-bank variance covering a `d_k`-wide head.
    pub fn uniform_diag(sigma_sq: f64, d_k: usize, bank_size: usize) -> Self {
        let n_banks = d_k.div_ceil(bank_size);
        BankStats::Diagonal { sigma_sq: vec![sigma_sq; n_banks], bank_size }
    }

    pub fn bank_size(&self) -> usize {
        match self {
            BankStats::Diagonal { bank_size, .. } => *bank_size,
            BankStats::Covariance { bank_size, .. } => *bank_size,
        }
    }

    pub fn n_banks(&self) -> usize {
        match self {
            BankStats::Diagonal { sigma_sq, .. } => sigma_sq.len(),
            BankStats::Covariance { cov, .. } => cov.len(),
        }
    }

    pub fn validate(&self, d_k: usize) -> Result<()> {
        let needed = d_k.div_ceil(self.bank_size());
        if self.n_banks() < needed {
            return Err(Error::Shape(format!(
                "{} banks of size {} cannot cover d_k = {d_k}",
                self.n_banks(),
                self.bank_size()
            )));
        }
        match self {
            BankStats::Diagonal { sigma_sq, .. } => {
                if sigma_sq.iter().any(|v| *v < 0.0) {
                    return Err(Error::Param("bank variances must be >= 0".into()));
                }
            }
            BankStats::Covariance { cov, bank_size } => {
                for (b, c) in cov.iter().enumerate() {
                    if c.rows() != *bank_size || c.cols() != *bank_size {
                        return Err(Error::Shape(format!(
                            "bank {b} covariance is {}x{}, expected {bank_size}x{bank_size}",
                            c.rows(),
                            c.cols()
                        )));
                    }
                    for i in 0..c.rows() {
                        for j in 0..i {
                            if (c.get(i, j) - c.get(j, i)).abs() > 1e-10 {
                                return Err(Error::Param(format!(
                                    "bank {b} covariance not symmetric at ({i},{j})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn slice_range(b: usize, bank_size: usize, d_k: usize) -> std::ops::Range<usize> {
    (b * bank_size)..((b + 1) * bank_size).min(d_k)
}

/// Diagonal-statistics variance proxy for one (query, key) pair.
pub fn logit_variance_diag(q_t: &[f64], k_u: &[f64], stats: &BankStats, d_k: usize) -> Result<f64> {
    if q_t.len() != d_k || k_u.len() != d_k {
        return Err(Error::Shape(format!(
            "expected d_k = {d_k} vectors, got {} and {}",
            q_t.len(),
            k_u.len()
        )));
    }
    stats.validate(d_k)?;
    let BankStats::Diagonal { sigma_sq, bank_size } = stats else {
        return Err(Error::Param("logit_variance_diag needs diagonal bank stats".into()));
    };
    let mut v = 0.0;
    for b in 0..d_k.div_ceil(*bank_size) {
        let r = slice_range(b, *bank_size, d_k);
        let nq: f64 = q_t[r.clone()].iter().map(|x| x * x).sum();
        let nk: f64 = k_u[r].iter().map(|x| x * x).sum();
        v += sigma_sq[b] * nq * nk;
    }
    Ok(v / d_k as f64)
}

/// Gradient of [`logit_variance_diag`] with respect to q and k, scaled by
/// `upstream`.
pub fn logit_variance_diag_backward(
    q_t: &[f64],
    k_u: &[f64],
    stats: &BankStats,
    d_k: usize,
    upstream: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let BankStats::Diagonal { sigma_sq, bank_size } = stats else {
        return Err(Error::Param("logit_variance_diag needs diagonal bank stats".into()));
    };
    let mut dq = vec![0.0; d_k];
    let mut dk = vec![0.0; d_k];
    let scale = upstream / d_k as f64;
    for b in 0..d_k.div_ceil(*bank_size) {
        let r = slice_range(b, *bank_size, d_k);
        let nq: f64 = q_t[r.clone()].iter().map(|x| x * x).sum();
        let nk: f64 = k_u[r.clone()].iter().map(|x| x * x).sum();
        for i in r {
            dq[i] += scale * sigma_sq[b] * 2.0 * q_t[i] * nk;
            dk[i] += scale * sigma_sq[b] * 2.0 * k_u[i] * nq;
        }
    }
    Ok((dq, dk))
}

/// Covariance-statistics variance proxy for one (query, key) pair.
pub fn logit_variance_cov(q_t: &[f64], k_u: &[f64], stats: &BankStats, d_k: usize) -> Result<f64> {
    if q_t.len() != d_k || k_u.len() != d_k {
        return Err(Error::Shape(format!(
            "expected d_k = {d_k} vectors, got {} and {}",
            q_t.len(),
            k_u.len()
        )));
    }
    stats.validate(d_k)?;
    let BankStats::Covariance { cov, bank_size } = stats else {
        return Err(Error::Param("logit_variance_cov needs covariance bank stats".into()));
    };
    let mut v = 0.0;
    for b in 0..d_k.div_ceil(*bank_size) {
        let r = slice_range(b, *bank_size, d_k);
        let h: Vec<f64> = r.clone().map(|i| q_t[i] * k_u[i]).collect();
        let c = &cov[b];
        for (i, hi) in h.iter().enumerate() {
            for (j, hj) in h.iter().enumerate() {
                v += hi * c.get(i, j) * hj;
            }
        }
    }
    Ok(v / d_k as f64)
}

/// Probability that zero-mean Gaussian noise of std `sigma` reverses an
/// ordering with clean margin `margin`: `Phi(-margin / sigma)`.
pub fn flip_probability(margin: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("flip_probability requires sigma > 0, got {sigma}")));
    }
    Ok(std_normal_cdf(-margin / sigma))
}

/// Adversarial competitor set for one attention row: the union of the
/// top-ceil(K/2) non-top logits and the top-floor(K/2) variances,
/// deduplicated and refilled by logit order. Ties break toward the lower
/// index; the clean top-1 is excluded.
pub fn competitor_set(row_logits: &[f64], row_variances: &[f64], k: usize) -> Result<Vec<usize>> {
    let u = row_logits.len();
    if row_variances.len() != u {
        return Err(Error::Shape(format!(
            "logits ({u}) and variances ({}) differ",
            row_variances.len()
        )));
    }
    if u < 2 {
        return Err(Error::Param("competitor_set needs at least 2 keys".into()));
    }
    let top = argmax_first(row_logits);
    let mut by_logit: Vec<usize> = (0..u).filter(|i| *i != top).collect();
    by_logit.sort_by(|&a, &b| row_logits[b].partial_cmp(&row_logits[a]).unwrap().then(a.cmp(&b)));
    let mut by_var = by_logit.clone();
    by_var.sort_by(|&a, &b| {
        row_variances[b].partial_cmp(&row_variances[a]).unwrap().then(a.cmp(&b))
    });

    let want = k.min(u - 1);
    let mut set: Vec<usize> = Vec::with_capacity(want);
    for &i in by_logit.iter().take(k.div_ceil(2)) {
        if !set.contains(&i) {
            set.push(i);
        }
    }
    for &i in by_var.iter().take(k / 2) {
        if !set.contains(&i) {
            set.push(i);
        }
    }
    for &i in &by_logit {
        if set.len() >= want {
            break;
        }
        if !set.contains(&i) {
            set.push(i);
        }
    }
    set.truncate(want);
    set.sort_unstable();
    Ok(set)
}

/// First-wins argmax: ties resolve to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-logit variances for a T x U attention map with the derived pairwise
/// margin statistics.
#[derive(Debug, Clone)]
pub struct LogitVarianceMap {
    pub v: Matrix,
    pub top1: Vec<usize>,
}

impl LogitVarianceMap {
    /// Build from an attention-logit matrix and its per-logit variances.
    pub fn new(logits: &Matrix, v: Matrix) -> Result<Self> {
        if logits.rows() != v.rows() || logits.cols() != v.cols() {
            return Err(Error::Shape("logits and variances must share a shape".into()));
        }
        if v.data().iter().any(|x| *x < 0.0) {
            return Err(Error::Param("logit variances must be >= 0".into()));
        }
        let top1 = (0..logits.rows()).map(|t| argmax_first(logits.row(t))).collect();
        Ok(Self { v, top1 })
    }

    /// Pairwise margin variance `sigma_{t,ij}^2 = v[t, top1(t)] + v[t, j]`.
    pub fn pairwise_sigma_sq(&self, t: usize, j: usize) -> f64 {
        self.v.get(t, self.top1[t]) + self.v.get(t, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng::SeedContext;

    #[test]
    fn diag_zero_stats_give_zero() {
        let stats = BankStats::uniform_diag(0.0, 16, 15);
        let q = vec![1.0; 16];
        let k = vec![1.0; 16];
        assert_eq!(logit_variance_diag(&q, &k, &stats, 16).unwrap(), 0.0);
    }

    #[test]
    fn diag_single_bank_scalar_case() {
        // q = k = e1, one bank with sigma^2 = 0.04, d_k = 16.
        let stats = BankStats::Diagonal { sigma_sq: vec![0.04, 0.04], bank_size: 15 };
        let mut q = vec![0.0; 16];
        q[0] = 1.0;
        let v = logit_variance_diag(&q, &q, &stats, 16).unwrap();
        assert!((v - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn diag_homogeneity_in_q() {
        let stats = BankStats::uniform_diag(0.09, 32, 15);
        let ctx = SeedContext::new(1);
        let q: Vec<f64> =
            (0..32).map(|i| ctx.child("q", i).stream().normal_at(0, 0.0, 1.0)).collect();
        let k: Vec<f64> =
            (0..32).map(|i| ctx.child("k", i).stream().normal_at(0, 0.0, 1.0)).collect();
        let v1 = logit_variance_diag(&q, &k, &stats, 32).unwrap();
        let q3: Vec<f64> = q.iter().map(|x| 3.0 * x).collect();
        let v9 = logit_variance_diag(&q3, &k, &stats, 32).unwrap();
        assert!((v9 - 9.0 * v1).abs() < 1e-12 * v1.max(1.0));
    }

    /// Monte-Carlo oracle: perturb each bank slice's MAC with that bank's
    /// Gaussian envelope (std sigma_b |q_b| |k_b|) and compare the
    /// empirical logit variance with the proxy.
    #[test]
    fn diag_matches_bank_envelope_monte_carlo() {
        let d_k: usize = 32;
        let stats = BankStats::Diagonal { sigma_sq: vec![0.04, 0.09, 0.01], bank_size: 15 };
        let ctx = SeedContext::new(2);
        let q: Vec<f64> =
            (0..d_k).map(|i| ctx.child("q", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let k: Vec<f64> =
            (0..d_k).map(|i| ctx.child("k", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();

        let BankStats::Diagonal { sigma_sq, bank_size } = &stats else { unreachable!() };
        let mut envelopes = Vec::new();
        for b in 0..d_k.div_ceil(*bank_size) {
            let r = slice_range(b, *bank_size, d_k);
            let nq: f64 = q[r.clone()].iter().map(|x| x * x).sum();
            let nk: f64 = k[r].iter().map(|x| x * x).sum();
            envelopes.push(sigma_sq[b].sqrt() * (nq * nk).sqrt());
        }
        let scale = 1.0 / (d_k as f64).sqrt();
        let s = ctx.child("mc", 0).stream();
        let trials = 100_000u64;
        let mut sumsq = 0.0;
        let mut sum = 0.0;
        for t in 0..trials {
            let mut d_logit = 0.0;
            for (b, env) in envelopes.iter().enumerate() {
                d_logit += env * s.std_normal_at(t * envelopes.len() as u64 + b as u64);
            }
            let d = scale * d_logit;
            sum += d;
            sumsq += d * d;
        }
        let n = trials as f64;
        let mc_var = sumsq / n - (sum / n) * (sum / n);
        let proxy = logit_variance_diag(&q, &k, &stats, d_k).unwrap();
        assert!((mc_var - proxy).abs() / proxy < 0.10, "MC {mc_var} vs proxy {proxy}");
    }

    #[test]
    fn cov_zero_stats_give_zero() {
        let stats = BankStats::Covariance { cov: vec![Matrix::zeros(15, 15)], bank_size: 15 };
        let q = vec![0.5; 15];
        assert_eq!(logit_variance_cov(&q, &q, &stats, 15).unwrap(), 0.0);
    }

    #[test]
    fn cov_rank_one_quadratic_form() {
        // Sigma = u u^T makes the proxy ((q . k) dot u)^2 / d_k.
        let d_k = 15;
        let ctx = SeedContext::new(3);
        let u: Vec<f64> =
            (0..d_k).map(|i| ctx.child("u", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let cov = Matrix::from_fn(15, 15, |i, j| u[i] * u[j]);
        let stats = BankStats::Covariance { cov: vec![cov], bank_size: 15 };
        let q: Vec<f64> =
            (0..d_k).map(|i| ctx.child("q", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let k: Vec<f64> =
            (0..d_k).map(|i| ctx.child("k", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let dot: f64 = (0..d_k).map(|i| q[i] * k[i] * u[i]).sum();
        let expect = dot * dot / d_k as f64;
        let v = logit_variance_cov(&q, &k, &stats, d_k).unwrap();
        assert!((v - expect).abs() < 1e-12 * expect.max(1.0));
    }

    #[test]
    fn cov_psd_gives_nonnegative() {
        let ctx = SeedContext::new(4);
        // A A^T is PSD by construction.
        let a = Matrix::random_normal(&ctx.child("a", 0), 15, 15, 0.0, 1.0);
        let cov =
            Matrix::from_fn(15, 15, |i, j| (0..15).map(|k| a.get(i, k) * a.get(j, k)).sum());
        let stats = BankStats::Covariance { cov: vec![cov], bank_size: 15 };
        for t in 0..20u64 {
            let q: Vec<f64> = (0..15)
                .map(|i| ctx.child("q", t * 15 + i as u64).stream().normal_at(0, 0.0, 1.0))
                .collect();
            let k: Vec<f64> = (0..15)
                .map(|i| ctx.child("k", t * 15 + i as u64).stream().normal_at(0, 0.0, 1.0))
                .collect();
            assert!(logit_variance_cov(&q, &k, &stats, 15).unwrap() >= 0.0);
        }
    }

    #[test]
    fn diag_backward_matches_finite_differences() {
        let d_k = 32;
        let stats = BankStats::Diagonal { sigma_sq: vec![0.04, 0.09, 0.01], bank_size: 15 };
        let ctx = SeedContext::new(5);
        let q: Vec<f64> =
            (0..d_k).map(|i| ctx.child("q", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let k: Vec<f64> =
            (0..d_k).map(|i| ctx.child("k", i as u64).stream().normal_at(0, 0.0, 1.0)).collect();
        let (dq, dk) = logit_variance_diag_backward(&q, &k, &stats, d_k, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..d_k {
            let mut qp = q.clone();
            qp[i] += h;
            let mut qm = q.clone();
            qm[i] -= h;
            let fd = (logit_variance_diag(&qp, &k, &stats, d_k).unwrap()
                - logit_variance_diag(&qm, &k, &stats, d_k).unwrap())
                / (2.0 * h);
            assert!((fd - dq[i]).abs() < 1e-6 * fd.abs().max(1.0), "dq[{i}]");
            let mut kp = k.clone();
            kp[i] += h;
            let mut km = k.clone();
            km[i] -= h;
            let fd = (logit_variance_diag(&q, &kp, &stats, d_k).unwrap()
                - logit_variance_diag(&q, &km, &stats, d_k).unwrap())
                / (2.0 * h);
            assert!((fd - dk[i]).abs() < 1e-6 * fd.abs().max(1.0), "dk[{i}]");
        }
    }

    #[test]
    fn flip_probability_known_points() {
        assert_eq!(flip_probability(0.0, 1.0).unwrap(), 0.5);
        let p = flip_probability(1.645, 1.0).unwrap();
        assert!((p - 0.05).abs() < 1e-4);
        assert!(flip_probability(1.0, 0.0).is_err());
    }

    #[test]
    fn flip_probability_decreasing_in_margin() {
        let mut prev = 1.0;
        for i in 0..=40 {
            let m = -2.0 + 4.0 * i as f64 / 40.0;
            let p = flip_probability(m, 0.7).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn flip_probability_scale_invariant() {
        let a = flip_probability(0.3, 0.2).unwrap();
        let b = flip_probability(3.0, 2.0).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn flip_rate_monte_carlo() {
        let s = SeedContext::new(6).child("mc", 0).stream();
        for (case, ratio) in [0.0f64, 0.84, 1.645].iter().enumerate() {
            let sigma = 0.8;
            let margin = ratio * sigma;
            let n = 1_000_000u64;
            let mut flips = 0u64;
            for t in 0..n {
                let noisy = margin + sigma * s.std_normal_at(case as u64 * n + t);
                if noisy <= 0.0 {
                    flips += 1;
                }
            }
            let expect = flip_probability(margin, sigma).unwrap();
            let rate = flips as f64 / n as f64;
            let tol = 3.0 * (expect * (1.0 - expect) / n as f64).sqrt();
            assert!((rate - expect).abs() <= tol, "m/s={ratio}: {rate} vs {expect}");
        }
    }

    #[test]
    fn competitor_set_two_keys() {
        let set = competitor_set(&[1.0, 0.2], &[0.0, 0.0], 4).unwrap();
        assert_eq!(set, vec![1]);
    }

    #[test]
    fn competitor_set_includes_both_leaders() {
        // top-1 is index 0; index 3 leads by logit, index 1 by variance.
        let logits = [5.0, 1.0, 0.5, 3.0, 0.1];
        let vars = [0.0, 9.0, 0.1, 0.2, 0.3];
        let set = competitor_set(&logits, &vars, 2).unwrap();
        assert_eq!(set, vec![1, 3]);
    }

    #[test]
    fn competitor_set_saturates() {
        let logits = [5.0, 1.0, 0.5, 3.0];
        let vars = [0.0, 0.1, 0.2, 0.3];
        let set = competitor_set(&logits, &vars, 10).unwrap();
        assert_eq!(set, vec![1, 2, 3]);
    }

    #[test]
    fn competitor_set_tie_break_is_lower_index() {
        let logits = [2.0, 1.0, 1.0, 1.0];
        let vars = [0.0, 0.5, 0.5, 0.5];
        let set = competitor_set(&logits, &vars, 2).unwrap();
        assert_eq!(set, vec![1, 2]);
    }

    #[test]
    fn variance_map_pairwise_sum() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, 3.0, 2.0, 9.0, 1.0, 1.0]).unwrap();
        let v = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let map = LogitVarianceMap::new(&logits, v).unwrap();
        assert_eq!(map.top1, vec![1, 0]);
        assert!((map.pairwise_sigma_sq(0, 2) - 0.5).abs() < 1e-15);
        assert!((map.pairwise_sigma_sq(1, 1) - 0.9).abs() < 1e-15);
    }
}
