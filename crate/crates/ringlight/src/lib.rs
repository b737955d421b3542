//! Desk-scale emulator of microring-resonator (MR) silicon-photonic matrix
//! multiplication, with the measured-statistics noise model, two algorithmic
//! defenses (chance-constrained attention margins and noise-aware LayerNorm)
//! wired into a small trainable vision transformer, and an analytical
//! energy/latency model of the optical accelerator.
//!
//! Module map:
//! - [`math`]: dense matrices, splittable counter-based RNG, normal CDF/quantile
//! - [`noise`]: the three multiplicative noise sources and MAC output variance
//! - [`device`]: differential weight encoding, Lorentzian detuning LUT, jitter
//! - [`variation`]: spatially correlated resonance-shift maps and bank sampling
//! - [`optical`]: tiling onto the 64-arm x 32-wavelength core and noisy matmul
//! - [`proxy`]: per-logit variance proxies and attention flip statistics
//! - [`robust`]: chance-constrained hinge loss and noise-aware LayerNorm
//! - [`vit`]: tiny vision transformer with hand-written reverse mode
//! - [`perf`]: energy/latency accounting calibrated against reference totals
//! - [`config`] / [`cli`]: experiment configuration and the command surface

pub mod cli;
pub mod config;
pub mod device;
pub mod error;
pub mod math;
pub mod noise;
pub mod optical;
pub mod perf;
pub mod proxy;
pub mod robust;
pub mod variation;
pub mod vit;

pub use error::{Error, Result};
pub use math::matrix::Matrix;
pub use math::rng::SeedContext;
pub use noise::NoiseParams;
