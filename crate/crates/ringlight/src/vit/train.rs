//! AdamW training loop, noisy evaluation, and checkpointing.
//!
//! Robust fine-tuning runs noise-free forward passes plus the analytic
//! CCT/NALN terms; the optional noisy-forward mode reproduces the plain
//! noise-injection fine-tuning baseline (backward treats the injected
//! noise as constant). All stochastic choices are keyed by (seed, epoch,
//! step), so resuming from a checkpoint reproduces the run bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::math::io::{load_matrix, save_matrix};
use crate::math::rng::{labels, SeedContext};
use crate::noise::NoiseParams;
use crate::optical::OpticalConfig;
use crate::robust::{sigma_n_proxy_for_layer, tau_schedule, CCTConfig};
use crate::vit::model::{backward, forward, CctForward, ForwardOpts, Mode, Model};
use crate::vit::data::Dataset;
use crate::vit::{NoiseInjectionPolicy, NormKind, ParamSet, ViTConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// 0 disables the chance-constraint penalty.
    pub lambda_cct: f64,
    pub cct: CCTConfig,
    /// Train on noisy-emulated forward passes (plain noise-injection FT).
    pub noisy_forward: bool,
    /// Per-bank variance for the logit proxies; None derives it from the
    /// noise triple as sigma_fab^2 + sigma_thermal^2 + sigma_laser^2.
    pub bank_sigma_sq: Option<f64>,
    pub eval_trials: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_cct: 0.0,
            cct: CCTConfig::default(),
            noisy_forward: false,
            bank_sigma_sq: None,
            eval_trials: 10,
        }
    }
}

impl TrainConfig {
    pub fn bank_sigma(&self, noise: &NoiseParams) -> f64 {
        self.bank_sigma_sq.unwrap_or_else(|| noise.variance_sum())
    }
}

/// Per-epoch metric row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub ce_loss: f64,
    pub cct_loss: f64,
    pub clean_acc: f64,
    pub z_tau: f64,
}

/// Running per-channel mean squares of every optical operator's input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationStats {
    sq_sums: Vec<Vec<f64>>,
    counts: Vec<f64>,
    rms: Vec<Vec<f64>>,
}

const STAT_EMBED: usize = 0;
const STAT_HEAD: usize = 1;
const STAT_BLOCK_BASE: usize = 2;
const STAT_PER_BLOCK: usize = 4;
const STAT_QKV: usize = 0;
const STAT_OUT: usize = 1;
const STAT_FFN1: usize = 2;
const STAT_FFN2: usize = 3;

impl ActivationStats {
    pub fn new(cfg: &ViTConfig) -> Self {
        let mut widths = vec![cfg.patch_dim(), cfg.d_model];
        for _ in 0..cfg.n_layers {
            widths.extend([cfg.d_model, cfg.d_model, cfg.d_model, cfg.d_ffn()]);
        }
        ActivationStats {
            sq_sums: widths.iter().map(|w| vec![0.0; *w]).collect(),
            counts: vec![0.0; widths.len()],
            // Unit RMS prior until the first refresh.
            rms: widths.iter().map(|w| vec![1.0; *w]).collect(),
        }
    }

    fn block_stat(l: usize, slot: usize) -> usize {
        STAT_BLOCK_BASE + l * STAT_PER_BLOCK + slot
    }

    fn accumulate(&mut self, op: usize, m: &crate::math::matrix::Matrix) {
        for i in 0..m.rows() {
            for (ch, v) in m.row(i).iter().enumerate() {
                self.sq_sums[op][ch] += v * v;
            }
        }
        self.counts[op] += m.rows() as f64;
    }

    pub fn update_from_cache(&mut self, cache: &crate::vit::model::ForwardCache) {
        self.accumulate(STAT_EMBED, &cache.patches);
        for (l, bc) in cache.blocks.iter().enumerate() {
            self.accumulate(Self::block_stat(l, STAT_QKV), &bc.n1_out);
            self.accumulate(Self::block_stat(l, STAT_OUT), &bc.concat);
            self.accumulate(Self::block_stat(l, STAT_FFN1), &bc.n2_out);
            self.accumulate(Self::block_stat(l, STAT_FFN2), &bc.gelu_out);
        }
        let cls = crate::math::matrix::Matrix::from_vec(
            1,
            cache.cls_normed.len(),
            cache.cls_normed.clone(),
        )
        .expect("cls row is finite");
        self.accumulate(STAT_HEAD, &cls);
    }

    /// Fold the epoch's accumulators into the RMS estimates and reset.
    pub fn refresh(&mut self) {
        for op in 0..self.sq_sums.len() {
            if self.counts[op] > 0.0 {
                for ch in 0..self.sq_sums[op].len() {
                    self.rms[op][ch] = (self.sq_sums[op][ch] / self.counts[op]).sqrt();
                    self.sq_sums[op][ch] = 0.0;
                }
                self.counts[op] = 0.0;
            }
        }
    }

    pub fn rms_for(&self, op: usize) -> &[f64] {
        &self.rms[op]
    }
}

/// Per-site NALN noise variances from the running stats.
///
/// Contributions that land on the residual stream accumulate along it:
/// a block's first norm sees the patch embedding plus every earlier
/// block's output-projection and second-FFN noise; the second norm adds
/// the current block's attention output; the final norm sees everything.
pub fn norm_sigmas_from_stats(
    model: &Model,
    stats: &ActivationStats,
    noise: &NoiseParams,
) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let p = &model.params;
    let embed_p =
        sigma_n_proxy_for_layer(stats.rms_for(STAT_EMBED), p.get("embed.w"), noise)?;
    let mut out = Vec::with_capacity(cfg.n_norm_sites());
    let mut stream = embed_p;
    for l in 0..cfg.n_layers {
        let pre = format!("block{l}");
        out.push(stream); // ln1 site
        let o_p = sigma_n_proxy_for_layer(
            stats.rms_for(ActivationStats::block_stat(l, STAT_OUT)),
            p.get(&format!("{pre}.wo")),
            noise,
        )?;
        stream += o_p;
        out.push(stream); // ln2 site
        let f2_p = sigma_n_proxy_for_layer(
            stats.rms_for(ActivationStats::block_stat(l, STAT_FFN2)),
            p.get(&format!("{pre}.w2")),
            noise,
        )?;
        stream += f2_p;
    }
    out.push(stream); // final norm
    Ok(out)
}

/// Full training state: model, optimizer moments, stats, history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    pub step: u64,
    pub epoch: usize,
    pub stats: ActivationStats,
    pub norm_sigmas: Vec<f64>,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let m = model.params.zeros_like();
        let v = model.params.zeros_like();
        let stats = ActivationStats::new(&model.cfg);
        let sites = model.cfg.n_norm_sites();
        TrainState {
            model,
            adam_m: m,
            adam_v: v,
            step: 0,
            epoch: 0,
            stats,
            norm_sigmas: vec![0.0; sites],
            history: Vec::new(),
        }
    }
}

fn adamw_step(state: &mut TrainState, grads: &ParamSet, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let decay_mask = state.model.params.decay_mask().to_vec();
    for ti in 0..grads.tensors.len() {
        let decay = if decay_mask[ti] { cfg.weight_decay } else { 0.0 };
        let g = grads.tensors[ti].data();
        let m = state.adam_m.tensors[ti].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.adam_v.tensors[ti].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let m = state.adam_m.tensors[ti].data().to_vec();
        let v = state.adam_v.tensors[ti].data().to_vec();
        let p = state.model.params.tensors[ti].data_mut();
        for i in 0..p.len() {
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + decay * p[i]);
        }
    }
}

/// Deterministic Fisher-Yates permutation keyed by (ctx, epoch).
fn shuffled_indices(n: usize, ctx: &SeedContext, epoch: usize) -> Vec<usize> {
    let s = ctx.child("shuffle", epoch as u64).stream();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = s.index_at(i as u64, (i + 1) as u64) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Exact-forward top-1 accuracy.
pub fn clean_accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    let opts = ForwardOpts::exact();
    let mut hits = 0usize;
    for (img, label) in ds.images.iter().zip(&ds.labels) {
        let (logits, _) = forward(model, img, &opts)?;
        if crate::proxy::argmax_first(&logits) == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_trial: Vec<f64>,
    pub mean: f64,
    pub best: f64,
    pub std: f64,
}

/// Top-1 accuracy over independently seeded noisy chips.
///
/// Each trial is a fresh chip (new frozen fabrication draw); each image is
/// one forward pass on that chip.
pub fn evaluate_noisy(
    model: &Model,
    ds: &Dataset,
    noise: &NoiseParams,
    trials: usize,
    ctx: &SeedContext,
    norm_sigmas: &[f64],
) -> Result<EvalReport> {
    if trials == 0 {
        return Err(Error::Param("evaluate_noisy needs trials >= 1".into()));
    }
    let sigmas = if model.cfg.norm_kind == NormKind::Naln {
        norm_sigmas.to_vec()
    } else {
        Vec::new()
    };
    let mut per_trial = Vec::with_capacity(trials);
    for r in 0..trials {
        let chip = ctx.child(labels::CHIP, r as u64);
        let mut hits = 0usize;
        for (i, (img, label)) in ds.images.iter().zip(&ds.labels).enumerate() {
            let opts = ForwardOpts {
                norm_sigmas: sigmas.clone(),
                ..ForwardOpts::noisy(noise.clone(), chip.child(labels::PASS, i as u64))
            };
            let (logits, _) = forward(model, img, &opts)?;
            if crate::proxy::argmax_first(&logits) == *label {
                hits += 1;
            }
        }
        per_trial.push(hits as f64 / ds.len() as f64);
    }
    let n = per_trial.len() as f64;
    let mean = per_trial.iter().sum::<f64>() / n;
    let best = per_trial.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let var = per_trial.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    Ok(EvalReport { per_trial, mean, best, std: var.sqrt() })
}

/// Run `cfg.epochs` of AdamW from the state's current position.
///
/// `noise` drives noisy-forward training, the bank statistics behind the
/// CCT proxies, and the NALN site variances. `eval_ds` feeds the per-epoch
/// clean accuracy in the history.
pub fn train(
    state: &mut TrainState,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &TrainConfig,
    noise: &NoiseParams,
    ctx: &SeedContext,
) -> Result<()> {
    if train_ds.is_empty() {
        return Err(Error::Param("training dataset is empty".into()));
    }
    let bank_sigma_sq = cfg.bank_sigma(noise);
    let use_cct = cfg.lambda_cct > 0.0;
    let target_epoch = state.epoch + cfg.epochs;

    while state.epoch < target_epoch {
        let epoch = state.epoch;
        let (_, z_tau) = tau_schedule(&cfg.cct, epoch)?;
        let order = shuffled_indices(train_ds.len(), ctx, epoch);
        let mut ep_ce = 0.0;
        let mut ep_cct = 0.0;
        let mut ep_batches = 0.0;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = state.model.params.zeros_like();
            let mut caches = Vec::with_capacity(batch.len());
            let mut hinge_sum = 0.0;
            let mut hinge_count = 0usize;
            for (i_in_batch, &idx) in batch.iter().enumerate() {
                let mode = if cfg.noisy_forward { Mode::NoisyEmulated } else { Mode::Exact };
                let pass = (epoch as u64) << 32 | (batch_no as u64) << 16 | i_in_batch as u64;
                let pass_ctx = ctx
                    .child("train-chip", 0)
                    .child(labels::PASS, pass);
                let sigmas = if mode == Mode::NoisyEmulated
                    && state.model.cfg.norm_kind == NormKind::Naln
                {
                    state.norm_sigmas.clone()
                } else {
                    Vec::new()
                };
                let opts = ForwardOpts {
                    mode,
                    noise: noise.clone(),
                    policy: NoiseInjectionPolicy::paper_default(),
                    optical: OpticalConfig::default(),
                    ctx: pass_ctx,
                    cct: if use_cct {
                        Some(CctForward { cfg: cfg.cct.clone(), epoch, bank_sigma_sq })
                    } else {
                        None
                    },
                    norm_sigmas: sigmas,
                };
                let (_, cache) = forward(&state.model, &train_ds.images[idx], &opts)?;
                let (hs, hc) = cache.cct_totals();
                hinge_sum += hs;
                hinge_count += hc;
                caches.push((cache, train_ds.labels[idx]));
            }

            let cct_w = if use_cct && hinge_count > 0 {
                cfg.lambda_cct / hinge_count as f64
            } else {
                0.0
            };
            let ce_w = 1.0 / batch.len() as f64;
            let mut batch_ce = 0.0;
            for (cache, label) in &caches {
                batch_ce +=
                    backward(&state.model, cache, *label, ce_w, cct_w, &mut grads)?;
                state.stats.update_from_cache(cache);
            }
            adamw_step(state, &grads, cfg);
            ep_ce += batch_ce / batch.len() as f64;
            ep_cct += if hinge_count > 0 { hinge_sum / hinge_count as f64 } else { 0.0 };
            ep_batches += 1.0;
        }

        state.stats.refresh();
        state.norm_sigmas = norm_sigmas_from_stats(&state.model, &state.stats, noise)?;
        state.epoch += 1;

        let ce = ep_ce / ep_batches;
        let cct_term = ep_cct / ep_batches;
        state.history.push(EpochMetrics {
            epoch,
            mean_loss: ce + cfg.lambda_cct * cct_term,
            ce_loss: ce,
            cct_loss: cct_term,
            clean_acc: clean_accuracy(&state.model, eval_ds)?,
            z_tau,
        });
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    epoch: usize,
    step: u64,
    vit: ViTConfig,
    norm_sigmas: Vec<f64>,
    tensor_names: Vec<String>,
    history: Vec<EpochMetrics>,
}

fn tensor_file(name: &str) -> String {
    format!("{}.mat", name.replace('.', "_"))
}

/// Write the train state as binary matrix containers plus a JSON manifest.
pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir.join("params"))?;
    std::fs::create_dir_all(dir.join("adam_m"))?;
    std::fs::create_dir_all(dir.join("adam_v"))?;
    let names: Vec<String> = state.model.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        save_matrix(&dir.join("params").join(tensor_file(name)), &state.model.params.tensors[i])?;
        save_matrix(&dir.join("adam_m").join(tensor_file(name)), &state.adam_m.tensors[i])?;
        save_matrix(&dir.join("adam_v").join(tensor_file(name)), &state.adam_v.tensors[i])?;
    }
    let manifest = CheckpointManifest {
        format: "ringlight-checkpoint-v1".into(),
        epoch: state.epoch,
        step: state.step,
        vit: state.model.cfg.clone(),
        norm_sigmas: state.norm_sigmas.clone(),
        tensor_names: names,
        history: state.history.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("stats.json"), serde_json::to_string(&state.stats)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != "ringlight-checkpoint-v1" {
        return Err(Error::Format(format!("unknown checkpoint format {}", manifest.format)));
    }
    let mut model = Model::init(manifest.vit.clone(), &SeedContext::new(0))?;
    let mut adam_m = model.params.zeros_like();
    let mut adam_v = model.params.zeros_like();
    for (i, name) in manifest.tensor_names.iter().enumerate() {
        if model.params.names().get(i) != Some(name) {
            return Err(Error::Format(format!("tensor order mismatch at '{name}'")));
        }
        model.params.tensors[i] = load_matrix(&dir.join("params").join(tensor_file(name)))?;
        adam_m.tensors[i] = load_matrix(&dir.join("adam_m").join(tensor_file(name)))?;
        adam_v.tensors[i] = load_matrix(&dir.join("adam_v").join(tensor_file(name)))?;
    }
    let stats: ActivationStats =
        serde_json::from_str(&std::fs::read_to_string(dir.join("stats.json"))?)?;
    Ok(TrainState {
        model,
        adam_m,
        adam_v,
        step: manifest.step,
        epoch: manifest.epoch,
        stats,
        norm_sigmas: manifest.norm_sigmas,
        history: manifest.history,
    })
}
