//! Desk-scale vision transformer with hand-written reverse mode.
//!
//! Patch embedding, a CLS token with learned positions, pre-norm encoder
//! blocks (MHSA + FFN with residuals), and a classifier head on the CLS
//! row. Every matmul can route through the optical emulator; softmax,
//! GELU, normalization, and residual additions stay electronic/exact.

pub mod data;
pub mod model;
pub mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::math::matrix::Matrix;
use crate::math::rng::SeedContext;
use crate::{Error, Result};

pub use model::{backward, forward, ForwardCache, ForwardOpts, Mode, Model};
pub use train::{evaluate_noisy, train, EvalReport, TrainConfig, TrainState};

/// Which normalization the encoder uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    LayerNorm,
    /// Noise-aware LayerNorm: subtracts the per-site noise-variance proxy
    /// when running on noisy activations.
    Naln,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub n_classes: usize,
    pub norm_kind: NormKind,
}

impl Default for ViTConfig {
    fn default() -> Self {
        // Smallest shape where bank slicing (15) and core tiling (32/64)
        // both exercise their padding paths.
        Self {
            image_size: 32,
            patch_size: 8,
            in_channels: 1,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            ffn_mult: 4,
            n_classes: 4,
            norm_kind: NormKind::LayerNorm,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return Err(Error::Param("image/patch/channel sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Param(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Param(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.n_classes < 2 {
            return Err(Error::Param("need n_layers >= 1, ffn_mult >= 1, n_classes >= 2".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Tokens including the CLS slot.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Number of normalization sites: two per block plus the final norm.
    pub fn n_norm_sites(&self) -> usize {
        2 * self.n_layers + 1
    }
}

/// Per-operator noise switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNoise {
    /// Fabrication + thermal multipliers on the operand held in the rings.
    pub weight: bool,
    /// Laser multiplier on the operand driving the VCSELs.
    pub input: bool,
}

impl OpNoise {
    pub const BOTH: OpNoise = OpNoise { weight: true, input: true };
    pub const OFF: OpNoise = OpNoise { weight: false, input: false };
}

/// Which operators receive which noise in noisy-emulated mode.
///
/// In the attention-score product the Q operand is held in the rings
/// (weight noise) while K drives the optical input (laser noise); the
/// value product holds V in the rings with the attention weights as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseInjectionPolicy {
    pub patch_embed: OpNoise,
    pub q_proj: OpNoise,
    pub k_proj: OpNoise,
    pub v_proj: OpNoise,
    pub attn_scores: OpNoise,
    pub attn_values: OpNoise,
    pub out_proj: OpNoise,
    pub ffn1: OpNoise,
    pub ffn2: OpNoise,
    pub head: OpNoise,
}

impl NoiseInjectionPolicy {
    /// Every linear operator carries both weight and input noise.
    pub fn paper_default() -> Self {
        Self {
            patch_embed: OpNoise::BOTH,
            q_proj: OpNoise::BOTH,
            k_proj: OpNoise::BOTH,
            v_proj: OpNoise::BOTH,
            attn_scores: OpNoise::BOTH,
            attn_values: OpNoise::BOTH,
            out_proj: OpNoise::BOTH,
            ffn1: OpNoise::BOTH,
            ffn2: OpNoise::BOTH,
            head: OpNoise::BOTH,
        }
    }

    pub fn off() -> Self {
        Self {
            patch_embed: OpNoise::OFF,
            q_proj: OpNoise::OFF,
            k_proj: OpNoise::OFF,
            v_proj: OpNoise::OFF,
            attn_scores: OpNoise::OFF,
            attn_values: OpNoise::OFF,
            out_proj: OpNoise::OFF,
            ffn1: OpNoise::OFF,
            ffn2: OpNoise::OFF,
            head: OpNoise::OFF,
        }
    }

    pub fn all_ops_have_both(&self) -> bool {
        [
            self.patch_embed,
            self.q_proj,
            self.k_proj,
            self.v_proj,
            self.attn_scores,
            self.attn_values,
            self.out_proj,
            self.ffn1,
            self.ffn2,
            self.head,
        ]
        .iter()
        .all(|o| o.weight && o.input)
    }
}

/// Stable stream indices for the model's optical operators.
pub(crate) mod op_slot {
    pub const EMBED: u64 = 0;
    pub const HEAD: u64 = 1;
    pub const BLOCK_BASE: u64 = 2;
    pub const PER_BLOCK: u64 = 8;
    pub const Q: u64 = 0;
    pub const K: u64 = 1;
    pub const V: u64 = 2;
    pub const SCORES: u64 = 3;
    pub const AV: u64 = 4;
    pub const OUT: u64 = 5;
    pub const FFN1: u64 = 6;
    pub const FFN2: u64 = 7;

    pub fn block_op(layer: usize, slot: u64) -> u64 {
        BLOCK_BASE + layer as u64 * PER_BLOCK + slot
    }
}

/// Named collection of parameter tensors (vectors are 1 x d matrices).
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
    pub tensors: Vec<Matrix>,
}

impl ParamSet {
    fn push(&mut self, name: &str, m: Matrix, decay: bool) {
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.decay.push(decay);
        self.tensors.push(m);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown tensor '{name}'"))
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.tensors[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            decay: self.decay.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|m| m.data().len()).sum()
    }

    /// Initialized parameters for the configuration.
    pub fn init(cfg: &ViTConfig, ctx: &SeedContext) -> Result<ParamSet> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut p = ParamSet {
            names: Vec::new(),
            decay: Vec::new(),
            index: HashMap::new(),
            tensors: Vec::new(),
        };
        let w_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        p.push(
            "embed.w",
            Matrix::random_normal(
                &ctx.child("embed.w", 0),
                cfg.patch_dim(),
                d,
                0.0,
                w_std(cfg.patch_dim()),
            ),
            true,
        );
        p.push("embed.b", Matrix::zeros(1, d), false);
        p.push("cls", Matrix::zeros(1, d), false);
        p.push(
            "pos",
            Matrix::random_normal(&ctx.child("pos", 0), cfg.n_tokens(), d, 0.0, 0.02),
            false,
        );
        for l in 0..cfg.n_layers {
            let pre = format!("block{l}");
            let lctx = ctx.child("block", l as u64);
            p.push(&format!("{pre}.ln1.g"), Matrix::from_vec(1, d, vec![1.0; d])?, false);
            p.push(&format!("{pre}.ln1.b"), Matrix::zeros(1, d), false);
            for (name, sub) in [("wq", 0u64), ("wk", 1), ("wv", 2), ("wo", 3)] {
                p.push(
                    &format!("{pre}.{name}"),
                    Matrix::random_normal(&lctx.child(name, sub), d, d, 0.0, w_std(d)),
                    true,
                );
                p.push(&format!("{pre}.b{}", &name[1..]), Matrix::zeros(1, d), false);
            }
            p.push(&format!("{pre}.ln2.g"), Matrix::from_vec(1, d, vec![1.0; d])?, false);
            p.push(&format!("{pre}.ln2.b"), Matrix::zeros(1, d), false);
            p.push(
                &format!("{pre}.w1"),
                Matrix::random_normal(&lctx.child("w1", 0), d, cfg.d_ffn(), 0.0, w_std(d)),
                true,
            );
            p.push(&format!("{pre}.b1"), Matrix::zeros(1, cfg.d_ffn()), false);
            p.push(
                &format!("{pre}.w2"),
                Matrix::random_normal(
                    &lctx.child("w2", 0),
                    cfg.d_ffn(),
                    d,
                    0.0,
                    w_std(cfg.d_ffn()),
                ),
                true,
            );
            p.push(&format!("{pre}.b2"), Matrix::zeros(1, d), false);
        }
        p.push("final.g", Matrix::from_vec(1, d, vec![1.0; d])?, false);
        p.push("final.b", Matrix::zeros(1, d), false);
        p.push(
            "head.w",
            Matrix::random_normal(&ctx.child("head.w", 0), d, cfg.n_classes, 0.0, w_std(d)),
            true,
        );
        p.push("head.b", Matrix::zeros(1, cfg.n_classes), false);
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig { patch_size: 7, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ViTConfig { n_heads: 3, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_shape_numbers() {
        let cfg = ViTConfig::default();
        assert_eq!(cfg.n_patches(), 16);
        assert_eq!(cfg.n_tokens(), 17);
        assert_eq!(cfg.patch_dim(), 64);
        assert_eq!(cfg.d_k(), 16);
    }

    #[test]
    fn paper_default_policy_has_both_everywhere() {
        assert!(NoiseInjectionPolicy::paper_default().all_ops_have_both());
        assert!(!NoiseInjectionPolicy::off().all_ops_have_both());
    }

    #[test]
    fn param_init_is_deterministic() {
        let cfg = ViTConfig::default();
        let a = ParamSet::init(&cfg, &SeedContext::new(1).child("init", 0)).unwrap();
        let b = ParamSet::init(&cfg, &SeedContext::new(1).child("init", 0)).unwrap();
        assert_eq!(a.n_params(), b.n_params());
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x.data(), y.data());
        }
    }
}
