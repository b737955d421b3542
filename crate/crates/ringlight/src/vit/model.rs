//! Forward and reverse passes of the encoder.
//!
//! The graph is fixed, so differentiation is per-operator backward rules
//! against cached activations rather than a taped autodiff. In
//! noisy-emulated mode every designated matmul routes through
//! [`crate::optical::noisy_matmul`]; the backward pass propagates through
//! the cached (noisy) activations with the clean weight matrices, which is
//! the usual straight-through treatment of injected noise.

use crate::math::matrix::{matmul, Matrix};
use crate::math::rng::{labels, SeedContext};
use crate::noise::NoiseParams;
use crate::optical::{noisy_matmul, OpticalConfig};
use crate::proxy::{BankStats, LogitVarianceMap, DEFAULT_BANK_SIZE};
use crate::robust::{cct_loss, naln_backward, naln_forward, CCTConfig, CctLoss, NALNConfig, NalnCache};
use crate::vit::{op_slot, NoiseInjectionPolicy, OpNoise, ParamSet, ViTConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Exact,
    NoisyEmulated,
}

/// CCT settings threaded through the forward pass.
#[derive(Debug, Clone)]
pub struct CctForward {
    pub cfg: CCTConfig,
    pub epoch: usize,
    /// Per-bank variance used for the logit variance proxies.
    pub bank_sigma_sq: f64,
}

/// Everything a forward pass needs besides the image.
#[derive(Debug, Clone)]
pub struct ForwardOpts {
    pub mode: Mode,
    pub noise: NoiseParams,
    pub policy: NoiseInjectionPolicy,
    pub optical: OpticalConfig,
    /// Pass-scoped stream context (chip / pass indices already applied).
    pub ctx: SeedContext,
    pub cct: Option<CctForward>,
    /// Per-site noise variances for NALN, length `n_norm_sites`;
    /// empty means all zero (plain LayerNorm behavior).
    pub norm_sigmas: Vec<f64>,
}

impl ForwardOpts {
    pub fn exact() -> Self {
        Self {
            mode: Mode::Exact,
            noise: NoiseParams::noiseless(),
            policy: NoiseInjectionPolicy::off(),
            optical: OpticalConfig::default(),
            ctx: SeedContext::new(0),
            cct: None,
            norm_sigmas: Vec::new(),
        }
    }

    pub fn noisy(noise: NoiseParams, ctx: SeedContext) -> Self {
        Self {
            mode: Mode::NoisyEmulated,
            noise,
            policy: NoiseInjectionPolicy::paper_default(),
            optical: OpticalConfig::default(),
            ctx,
            cct: None,
            norm_sigmas: Vec::new(),
        }
    }

    fn sigma_for_site(&self, site: usize) -> f64 {
        self.norm_sigmas.get(site).copied().unwrap_or(0.0)
    }
}

/// The model: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ViTConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn init(cfg: ViTConfig, ctx: &SeedContext) -> Result<Self> {
        let params = ParamSet::init(&cfg, ctx)?;
        Ok(Self { cfg, params })
    }
}

/// Normalization cache for one site: per-row state plus the sigma used.
#[derive(Debug, Clone)]
pub struct NormSite {
    pub rows: Vec<NalnCache>,
    pub sigma_used: f64,
    pub upstream_input_rows: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    /// Scaled attention logits `Q Kh^T / sqrt(d_k)`.
    pub s: Matrix,
    /// Softmax rows.
    pub a: Matrix,
    pub cct: Option<CctLoss>,
    pub vmap: Option<LogitVarianceMap>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub x_in: Matrix,
    pub n1: NormSite,
    pub n1_out: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub heads: Vec<HeadCache>,
    pub concat: Matrix,
    pub x_mid: Matrix,
    pub n2: NormSite,
    pub n2_out: Matrix,
    pub f1: Matrix,
    pub gelu_out: Matrix,
    pub x_out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub patches: Matrix,
    pub tokens: Matrix,
    pub blocks: Vec<BlockCache>,
    pub final_norm: NalnCache,
    pub final_sigma: f64,
    pub cls_normed: Vec<f64>,
    pub logits: Vec<f64>,
    pub bank_sigma_sq: f64,
}

impl ForwardCache {
    /// Sum and count of CCT hinge terms across active sites of this image.
    pub fn cct_totals(&self) -> (f64, usize) {
        let mut sum = 0.0;
        let mut count = 0;
        for b in &self.blocks {
            for h in &b.heads {
                if let Some(c) = &h.cct {
                    sum += c.hinge_sum;
                    count += c.hinge_count;
                }
            }
        }
        (sum, count)
    }
}

/// Extract non-overlapping patches row-major into an `n_patches x patch_dim`
/// matrix. Multi-channel images are laid out channel-major per patch.
pub fn extract_patches(image: &[f64], cfg: &ViTConfig) -> Result<Matrix> {
    let hw = cfg.image_size * cfg.image_size * cfg.in_channels;
    if image.len() != hw {
        return Err(Error::Shape(format!("image of {} pixels, expected {hw}", image.len())));
    }
    let ps = cfg.patch_size;
    let side = cfg.patches_per_side();
    let mut out = Matrix::zeros(cfg.n_patches(), cfg.patch_dim());
    for py in 0..side {
        for px in 0..side {
            let p = py * side + px;
            let mut col = 0;
            for c in 0..cfg.in_channels {
                let plane = c * cfg.image_size * cfg.image_size;
                for dy in 0..ps {
                    let row = (py * ps + dy) * cfg.image_size + px * ps;
                    for dx in 0..ps {
                        out.set(p, col, image[plane + row + dx]);
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn add_bias_rows(m: &mut Matrix, bias: &Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        for (v, b) in row.iter_mut().zip(bias.row(0)) {
            *v += b;
        }
    }
}

/// Noise parameters after applying an operator's policy switches.
fn op_noise_params(base: &NoiseParams, op: OpNoise) -> NoiseParams {
    let mut p = base.clone();
    if !op.weight {
        p.sigma_fab = 0.0;
        p.sigma_thermal = 0.0;
        p.jitter_std_pm = 0.0;
        p.jitter_bias_pm = 0.0;
    }
    if !op.input {
        p.sigma_laser = 0.0;
    }
    p
}

/// One matmul of the model, routed per mode; bias is added electronically.
fn operator_matmul(
    x: &Matrix,
    w: &Matrix,
    bias: Option<&Matrix>,
    op: OpNoise,
    op_index: u64,
    head: Option<usize>,
    opts: &ForwardOpts,
) -> Result<Matrix> {
    let mut y = match opts.mode {
        Mode::Exact => matmul(x, w)?,
        Mode::NoisyEmulated => {
            let mut ctx = opts.ctx.child(labels::OP, op_index);
            if let Some(h) = head {
                ctx = ctx.child(labels::HEAD, h as u64);
            }
            let params = op_noise_params(&opts.noise, op);
            noisy_matmul(x, w, &opts.optical, &params, &ctx)?.0
        }
    };
    if let Some(b) = bias {
        add_bias_rows(&mut y, b);
    }
    Ok(y)
}

/// Row-wise normalization via the NALN kernel (sigma = 0 is LayerNorm).
fn norm_rows(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
    sigma_n_sq: f64,
) -> Result<(Matrix, NormSite)> {
    let cfg = NALNConfig {
        sigma_n_sq,
        eps: 1e-5,
        gain: gain.row(0).to_vec(),
        bias: bias.row(0).to_vec(),
    };
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut rows = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let o = naln_forward(x.row(i), &cfg)?;
        out.row_mut(i).copy_from_slice(&o.y);
        rows.push(o.cache);
    }
    Ok((out, NormSite { rows, sigma_used: sigma_n_sq, upstream_input_rows: x.rows() }))
}

/// Backward of [`norm_rows`]; accumulates gain/bias grads, returns dx.
fn norm_rows_backward(
    upstream: &Matrix,
    site: &NormSite,
    gain: &Matrix,
    bias_name_grads: (&mut Matrix, &mut Matrix),
) -> Result<Matrix> {
    let cfg = NALNConfig {
        sigma_n_sq: site.sigma_used,
        eps: 1e-5,
        gain: gain.row(0).to_vec(),
        bias: vec![0.0; gain.cols()],
    };
    let (dgain, dbias) = bias_name_grads;
    let mut dx = Matrix::zeros(upstream.rows(), upstream.cols());
    for i in 0..upstream.rows() {
        let g = naln_backward(upstream.row(i), &cfg, &site.rows[i])?;
        dx.row_mut(i).copy_from_slice(&g.dx);
        for j in 0..upstream.cols() {
            dgain.set(0, j, dgain.get(0, j) + g.dgain[j]);
            dbias.set(0, j, dbias.get(0, j) + g.dbias[j]);
        }
    }
    Ok(dx)
}

pub fn gelu(x: f64) -> f64 {
    // tanh approximation, constants 0.7978845608028654 = sqrt(2/pi), 0.044715.
    const C: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &Matrix) -> Matrix {
    let mut a = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let row = s.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
        let mut z = 0.0;
        for (j, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            a.set(i, j, e);
            z += e;
        }
        for j in 0..s.cols() {
            a.set(i, j, a.get(i, j) / z);
        }
    }
    a
}

fn cols_slice(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(m.rows(), len, |i, j| m.get(i, start + j))
}

fn cols_add(target: &mut Matrix, start: usize, part: &Matrix) {
    for i in 0..part.rows() {
        for j in 0..part.cols() {
            target.set(i, start + j, target.get(i, start + j) + part.get(i, j));
        }
    }
}

fn col_sums_into(m: &Matrix, acc: &mut Matrix) {
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            acc.set(0, j, acc.get(0, j) + m.get(i, j));
        }
    }
}

/// Per-bank squared norms of each row of `m` (bank slicing of width 15).
fn bank_sq_norms(m: &Matrix, bank_size: usize) -> Vec<Vec<f64>> {
    let n_banks = m.cols().div_ceil(bank_size);
    (0..m.rows())
        .map(|t| {
            (0..n_banks)
                .map(|b| {
                    let lo = b * bank_size;
                    let hi = ((b + 1) * bank_size).min(m.cols());
                    m.row(t)[lo..hi].iter().map(|v| v * v).sum()
                })
                .collect()
        })
        .collect()
}

/// Logit variance proxy matrix for one head from its Q and K slices.
fn head_variance_map(
    s: &Matrix,
    q_h: &Matrix,
    k_h: &Matrix,
    bank_sigma_sq: f64,
    d_k: usize,
) -> Result<LogitVarianceMap> {
    let nq = bank_sq_norms(q_h, DEFAULT_BANK_SIZE);
    let nk = bank_sq_norms(k_h, DEFAULT_BANK_SIZE);
    let n_banks = d_k.div_ceil(DEFAULT_BANK_SIZE);
    let v = Matrix::from_fn(s.rows(), s.cols(), |t, u| {
        let mut acc = 0.0;
        for b in 0..n_banks {
            acc += bank_sigma_sq * nq[t][b] * nk[u][b];
        }
        acc / d_k as f64
    });
    LogitVarianceMap::new(s, v)
}

/// Backward of [`head_variance_map`]: scatter dL/dv into dQ_h and dK_h.
fn head_variance_backward(
    dv: &Matrix,
    q_h: &Matrix,
    k_h: &Matrix,
    bank_sigma_sq: f64,
    d_k: usize,
    dq_h: &mut Matrix,
    dk_h: &mut Matrix,
) {
    let nq = bank_sq_norms(q_h, DEFAULT_BANK_SIZE);
    let nk = bank_sq_norms(k_h, DEFAULT_BANK_SIZE);
    let n_banks = d_k.div_ceil(DEFAULT_BANK_SIZE);
    let scale = 2.0 * bank_sigma_sq / d_k as f64;
    for b in 0..n_banks {
        let lo = b * DEFAULT_BANK_SIZE;
        let hi = ((b + 1) * DEFAULT_BANK_SIZE).min(d_k);
        for t in 0..dv.rows() {
            let m1: f64 = (0..dv.cols()).map(|u| dv.get(t, u) * nk[u][b]).sum();
            if m1 != 0.0 {
                for i in lo..hi {
                    dq_h.set(t, i, dq_h.get(t, i) + scale * q_h.get(t, i) * m1);
                }
            }
        }
        for u in 0..dv.cols() {
            let m2: f64 = (0..dv.rows()).map(|t| dv.get(t, u) * nq[t][b]).sum();
            if m2 != 0.0 {
                for i in lo..hi {
                    dk_h.set(u, i, dk_h.get(u, i) + scale * k_h.get(u, i) * m2);
                }
            }
        }
    }
}

/// Run the encoder on one image.
pub fn forward(model: &Model, image: &[f64], opts: &ForwardOpts) -> Result<(Vec<f64>, ForwardCache)> {
    let cfg = &model.cfg;
    let p = &model.params;
    let d = cfg.d_model;
    let d_k = cfg.d_k();
    let t_tokens = cfg.n_tokens();
    let scale = 1.0 / (d_k as f64).sqrt();

    let patches = extract_patches(image, cfg)?;
    let embedded = operator_matmul(
        &patches,
        p.get("embed.w"),
        Some(p.get("embed.b")),
        opts.policy.patch_embed,
        op_slot::EMBED,
        None,
        opts,
    )?;

    let mut tokens = Matrix::zeros(t_tokens, d);
    tokens.row_mut(0).copy_from_slice(p.get("cls").row(0));
    for i in 0..cfg.n_patches() {
        tokens.row_mut(i + 1).copy_from_slice(embedded.row(i));
    }
    let pos = p.get("pos");
    for i in 0..t_tokens {
        let row = tokens.row_mut(i);
        for (v, q) in row.iter_mut().zip(pos.row(i)) {
            *v += q;
        }
    }

    let bank_sigma_sq = opts.cct.as_ref().map(|c| c.bank_sigma_sq).unwrap_or(0.0);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    let mut x = tokens.clone();
    for l in 0..cfg.n_layers {
        let pre = format!("block{l}");
        let x_in = x.clone();

        let (n1_out, n1) = norm_rows(
            &x_in,
            p.get(&format!("{pre}.ln1.g")),
            p.get(&format!("{pre}.ln1.b")),
            opts.sigma_for_site(2 * l),
        )?;

        let q = operator_matmul(
            &n1_out,
            p.get(&format!("{pre}.wq")),
            Some(p.get(&format!("{pre}.bq"))),
            opts.policy.q_proj,
            op_slot::block_op(l, op_slot::Q),
            None,
            opts,
        )?;
        let k = operator_matmul(
            &n1_out,
            p.get(&format!("{pre}.wk")),
            Some(p.get(&format!("{pre}.bk"))),
            opts.policy.k_proj,
            op_slot::block_op(l, op_slot::K),
            None,
            opts,
        )?;
        let v = operator_matmul(
            &n1_out,
            p.get(&format!("{pre}.wv")),
            Some(p.get(&format!("{pre}.bv"))),
            opts.policy.v_proj,
            op_slot::block_op(l, op_slot::V),
            None,
            opts,
        )?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut concat = Matrix::zeros(t_tokens, d);
        for h in 0..cfg.n_heads {
            let q_h = cols_slice(&q, h * d_k, d_k);
            let k_h = cols_slice(&k, h * d_k, d_k);
            let v_h = cols_slice(&v, h * d_k, d_k);

            // Scores: Q is held in the rings, K drives the light, so the
            // optical product is (K . Q^T) transposed back.
            let s_raw = match opts.mode {
                Mode::Exact => matmul(&q_h, &k_h.transpose())?,
                Mode::NoisyEmulated => operator_matmul(
                    &k_h,
                    &q_h.transpose(),
                    None,
                    opts.policy.attn_scores,
                    op_slot::block_op(l, op_slot::SCORES),
                    Some(h),
                    opts,
                )?
                .transpose(),
            };
            let s = s_raw.scale(scale);
            let a = softmax_rows(&s);
            let o_h = operator_matmul(
                &a,
                &v_h,
                None,
                opts.policy.attn_values,
                op_slot::block_op(l, op_slot::AV),
                Some(h),
                opts,
            )?;
            cols_add(&mut concat, h * d_k, &o_h);

            let (vmap, cct) = if let Some(spec) = &opts.cct {
                if spec.cfg.active_layers.contains(l, cfg.n_layers)
                    && spec.cfg.active_heads.contains(h)
                {
                    let vm = head_variance_map(&s, &q_h, &k_h, spec.bank_sigma_sq, d_k)?;
                    let loss = cct_loss(&s, &vm, &spec.cfg, spec.epoch)?;
                    (Some(vm), Some(loss))
                } else {
                    (None, None)
                }
            } else {
                (None, None)
            };
            heads.push(HeadCache { s, a, cct, vmap });
        }

        let attn_out = operator_matmul(
            &concat,
            p.get(&format!("{pre}.wo")),
            Some(p.get(&format!("{pre}.bo"))),
            opts.policy.out_proj,
            op_slot::block_op(l, op_slot::OUT),
            None,
            opts,
        )?;
        let x_mid = x_in.add(&attn_out)?;

        let (n2_out, n2) = norm_rows(
            &x_mid,
            p.get(&format!("{pre}.ln2.g")),
            p.get(&format!("{pre}.ln2.b")),
            opts.sigma_for_site(2 * l + 1),
        )?;
        let f1 = operator_matmul(
            &n2_out,
            p.get(&format!("{pre}.w1")),
            Some(p.get(&format!("{pre}.b1"))),
            opts.policy.ffn1,
            op_slot::block_op(l, op_slot::FFN1),
            None,
            opts,
        )?;
        let mut gelu_out = Matrix::zeros(f1.rows(), f1.cols());
        for i in 0..f1.rows() {
            for j in 0..f1.cols() {
                gelu_out.set(i, j, gelu(f1.get(i, j)));
            }
        }
        let f2 = operator_matmul(
            &gelu_out,
            p.get(&format!("{pre}.w2")),
            Some(p.get(&format!("{pre}.b2"))),
            opts.policy.ffn2,
            op_slot::block_op(l, op_slot::FFN2),
            None,
            opts,
        )?;
        let x_out = x_mid.add(&f2)?;

        x = x_out.clone();
        blocks.push(BlockCache {
            x_in,
            n1,
            n1_out,
            q,
            k,
            v,
            heads,
            concat,
            x_mid,
            n2,
            n2_out,
            f1,
            gelu_out,
            x_out,
        });
    }

    // Final norm applies per token; only the CLS row feeds the head.
    let final_sigma = opts.sigma_for_site(2 * cfg.n_layers);
    let fcfg = NALNConfig {
        sigma_n_sq: final_sigma,
        eps: 1e-5,
        gain: p.get("final.g").row(0).to_vec(),
        bias: p.get("final.b").row(0).to_vec(),
    };
    let fout = naln_forward(x.row(0), &fcfg)?;
    let cls_normed = fout.y;
    let cls_mat = Matrix::from_vec(1, d, cls_normed.clone())?;
    let logits_mat = operator_matmul(
        &cls_mat,
        p.get("head.w"),
        Some(p.get("head.b")),
        opts.policy.head,
        op_slot::HEAD,
        None,
        opts,
    )?;
    let logits = logits_mat.row(0).to_vec();

    Ok((
        logits.clone(),
        ForwardCache {
            patches,
            tokens,
            blocks,
            final_norm: fout.cache,
            final_sigma,
            cls_normed,
            logits,
            bank_sigma_sq,
        },
    ))
}

/// Cross-entropy of cached logits against a label: loss and d/d logits.
pub fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = -(p[label].max(1e-300)).ln();
    let mut grad = p;
    grad[label] -= 1.0;
    (loss, grad)
}

/// Reverse pass for one image; accumulates into `grads`.
///
/// `ce_weight` scales the cross-entropy term (1/batch for a batch mean);
/// `cct_weight` scales the raw hinge-sum gradients (lambda / global hinge
/// count, matching the aggregated 1/B normalization).
pub fn backward(
    model: &Model,
    cache: &ForwardCache,
    label: usize,
    ce_weight: f64,
    cct_weight: f64,
    grads: &mut ParamSet,
) -> Result<f64> {
    let cfg = &model.cfg;
    let p = &model.params;
    let d = cfg.d_model;
    let d_k = cfg.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();

    let (ce, mut dlogits) = softmax_ce(&cache.logits, label);
    for g in dlogits.iter_mut() {
        *g *= ce_weight;
    }

    // Head.
    let dlog = Matrix::from_vec(1, cfg.n_classes, dlogits)?;
    let cls_mat = Matrix::from_vec(1, d, cache.cls_normed.clone())?;
    let dw_head = matmul(&cls_mat.transpose(), &dlog)?;
    grads.get_mut("head.w").data_mut().iter_mut().zip(dw_head.data()).for_each(|(a, b)| *a += b);
    col_sums_into(&dlog, grads.get_mut("head.b"));
    let d_cls_normed = matmul(&dlog, &p.get("head.w").transpose())?;

    // Final norm (CLS row only; other rows have zero upstream).
    let fcfg = NALNConfig {
        sigma_n_sq: cache.final_sigma,
        eps: 1e-5,
        gain: p.get("final.g").row(0).to_vec(),
        bias: vec![0.0; d],
    };
    let fgrads = naln_backward(d_cls_normed.row(0), &fcfg, &cache.final_norm)?;
    for j in 0..d {
        let gg = grads.get_mut("final.g");
        gg.set(0, j, gg.get(0, j) + fgrads.dgain[j]);
        let gb = grads.get_mut("final.b");
        gb.set(0, j, gb.get(0, j) + fgrads.dbias[j]);
    }

    let t_tokens = cfg.n_tokens();
    let mut dx = Matrix::zeros(t_tokens, d);
    for j in 0..d {
        dx.set(0, j, fgrads.dx[j]);
    }

    for l in (0..cfg.n_layers).rev() {
        let pre = format!("block{l}");
        let bc = &cache.blocks[l];

        // x_out = x_mid + f2
        let df2 = dx.clone();
        let mut dx_mid = dx;

        // f2 = gelu_out . w2 + b2
        let dgelu = matmul(&df2, &p.get(&format!("{pre}.w2")).transpose())?;
        let dw2 = matmul(&bc.gelu_out.transpose(), &df2)?;
        grads
            .get_mut(&format!("{pre}.w2"))
            .data_mut()
            .iter_mut()
            .zip(dw2.data())
            .for_each(|(a, b)| *a += b);
        col_sums_into(&df2, grads.get_mut(&format!("{pre}.b2")));

        // gelu
        let mut df1 = Matrix::zeros(bc.f1.rows(), bc.f1.cols());
        for i in 0..bc.f1.rows() {
            for j in 0..bc.f1.cols() {
                df1.set(i, j, dgelu.get(i, j) * gelu_grad(bc.f1.get(i, j)));
            }
        }

        // f1 = n2_out . w1 + b1
        let dn2 = matmul(&df1, &p.get(&format!("{pre}.w1")).transpose())?;
        let dw1 = matmul(&bc.n2_out.transpose(), &df1)?;
        grads
            .get_mut(&format!("{pre}.w1"))
            .data_mut()
            .iter_mut()
            .zip(dw1.data())
            .for_each(|(a, b)| *a += b);
        col_sums_into(&df1, grads.get_mut(&format!("{pre}.b1")));

        // norm2
        {
            let gain = p.get(&format!("{pre}.ln2.g")).clone();
            let gi = grads.idx(&format!("{pre}.ln2.g"));
            let bi = grads.idx(&format!("{pre}.ln2.b"));
            let (dgain, dbias) = disjoint_pair(&mut grads.tensors, gi, bi);
            let dn2_in = norm_rows_backward(&dn2, &bc.n2, &gain, (dgain, dbias))?;
            dx_mid = dx_mid.add(&dn2_in)?;
        }

        // x_mid = x_in + attn_out
        let dattn = dx_mid.clone();
        let mut dx_in = dx_mid;

        // attn_out = concat . wo + bo
        let dconcat = matmul(&dattn, &p.get(&format!("{pre}.wo")).transpose())?;
        let dwo = matmul(&bc.concat.transpose(), &dattn)?;
        grads
            .get_mut(&format!("{pre}.wo"))
            .data_mut()
            .iter_mut()
            .zip(dwo.data())
            .for_each(|(a, b)| *a += b);
        col_sums_into(&dattn, grads.get_mut(&format!("{pre}.bo")));

        let mut dq = Matrix::zeros(t_tokens, d);
        let mut dk = Matrix::zeros(t_tokens, d);
        let mut dv = Matrix::zeros(t_tokens, d);
        for (h, hc) in bc.heads.iter().enumerate() {
            let q_h = cols_slice(&bc.q, h * d_k, d_k);
            let k_h = cols_slice(&bc.k, h * d_k, d_k);
            let v_h = cols_slice(&bc.v, h * d_k, d_k);
            let do_h = cols_slice(&dconcat, h * d_k, d_k);

            // o = a . v
            let da = matmul(&do_h, &v_h.transpose())?;
            let dv_h = matmul(&hc.a.transpose(), &do_h)?;

            // softmax rows
            let mut ds = Matrix::zeros(t_tokens, t_tokens);
            for t in 0..t_tokens {
                let dot: f64 =
                    (0..t_tokens).map(|u| da.get(t, u) * hc.a.get(t, u)).sum();
                for u in 0..t_tokens {
                    ds.set(t, u, hc.a.get(t, u) * (da.get(t, u) - dot));
                }
            }

            let mut dq_h = Matrix::zeros(t_tokens, d_k);
            let mut dk_h = Matrix::zeros(t_tokens, d_k);

            // CCT contributions flow into the scaled logits and, through
            // the variance proxies, directly into q and k.
            if cct_weight != 0.0 {
                if let Some(c) = &hc.cct {
                    for t in 0..t_tokens {
                        for u in 0..t_tokens {
                            ds.set(
                                t,
                                u,
                                ds.get(t, u) + cct_weight * c.d_logits_raw.get(t, u),
                            );
                        }
                    }
                    let dvmap = c.d_variances_raw.scale(cct_weight);
                    head_variance_backward(
                        &dvmap,
                        &q_h,
                        &k_h,
                        cache.bank_sigma_sq,
                        d_k,
                        &mut dq_h,
                        &mut dk_h,
                    );
                }
            }

            // s = scale * q . k^T
            let ds_scaled = ds.scale(scale);
            let dq_s = matmul(&ds_scaled, &k_h)?;
            let dk_s = matmul(&ds_scaled.transpose(), &q_h)?;
            for t in 0..t_tokens {
                for j in 0..d_k {
                    dq_h.set(t, j, dq_h.get(t, j) + dq_s.get(t, j));
                    dk_h.set(t, j, dk_h.get(t, j) + dk_s.get(t, j));
                }
            }

            cols_add(&mut dq, h * d_k, &dq_h);
            cols_add(&mut dk, h * d_k, &dk_h);
            cols_add(&mut dv, h * d_k, &dv_h);
        }

        // q/k/v projections share the n1 input.
        let mut dn1 = matmul(&dq, &p.get(&format!("{pre}.wq")).transpose())?;
        dn1 = dn1.add(&matmul(&dk, &p.get(&format!("{pre}.wk")).transpose())?)?;
        dn1 = dn1.add(&matmul(&dv, &p.get(&format!("{pre}.wv")).transpose())?)?;
        for (dm, wname, bname) in
            [(&dq, "wq", "bq"), (&dk, "wk", "bk"), (&dv, "wv", "bv")]
        {
            let dw = matmul(&bc.n1_out.transpose(), dm)?;
            grads
                .get_mut(&format!("{pre}.{wname}"))
                .data_mut()
                .iter_mut()
                .zip(dw.data())
                .for_each(|(a, b)| *a += b);
            col_sums_into(dm, grads.get_mut(&format!("{pre}.{bname}")));
        }

        // norm1
        {
            let gain = p.get(&format!("{pre}.ln1.g")).clone();
            let gi = grads.idx(&format!("{pre}.ln1.g"));
            let bi = grads.idx(&format!("{pre}.ln1.b"));
            let (dgain, dbias) = disjoint_pair(&mut grads.tensors, gi, bi);
            let dn1_in = norm_rows_backward(&dn1, &bc.n1, &gain, (dgain, dbias))?;
            dx_in = dx_in.add(&dn1_in)?;
        }

        dx = dx_in;
    }

    // tokens = [cls; patches . embed.w + embed.b] + pos
    grads.get_mut("pos").data_mut().iter_mut().zip(dx.data()).for_each(|(a, b)| *a += b);
    for j in 0..d {
        let gc = grads.get_mut("cls");
        gc.set(0, j, gc.get(0, j) + dx.get(0, j));
    }
    let d_embedded = Matrix::from_fn(cfg.n_patches(), d, |i, j| dx.get(i + 1, j));
    let dwe = matmul(&cache.patches.transpose(), &d_embedded)?;
    grads.get_mut("embed.w").data_mut().iter_mut().zip(dwe.data()).for_each(|(a, b)| *a += b);
    col_sums_into(&d_embedded, grads.get_mut("embed.b"));

    Ok(ce)
}

/// Two distinct mutable tensors out of the grad set.
fn disjoint_pair(tensors: &mut [Matrix], a: usize, b: usize) -> (&mut Matrix, &mut Matrix) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = tensors.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = tensors.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Bank statistics used for the in-model variance proxies.
pub fn training_bank_stats(bank_sigma_sq: f64, d_k: usize) -> BankStats {
    BankStats::uniform_diag(bank_sigma_sq, d_k, DEFAULT_BANK_SIZE)
}
