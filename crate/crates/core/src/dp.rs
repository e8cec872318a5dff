//! Client-level differential privacy: update clipping, Gaussian noising and
//! a Rényi-DP accountant for the composed Gaussian mechanism.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// ℓ₂ bound `C` on each client update.
    pub clip_norm: f32,
    /// Noise multiplier `σ`; per-coordinate std is `σ·C`.
    pub noise_sigma: f32,
    /// Target `δ` used only by the accountant.
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_sigma: 1.2,
            delta: 1e-5,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("dp.clip_norm must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || self.noise_sigma.is_infinite() {
            return Err(Error::Config("dp.noise_sigma must be finite and >= 0".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("dp.delta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// `delta · min(1, C / ‖delta‖₂)`. Vectors already inside the ball are
/// returned unchanged.
pub fn clip_update(delta: &[f32], clip_norm: f32) -> Vec<f32> {
    let norm = l2_norm(delta);
    let scale = clip_norm as f64 / norm;
    if !(scale < 1.0) {
        return delta.to_vec();
    }
    delta.iter().map(|&x| (x as f64 * scale) as f32).collect()
}

/// Adds i.i.d. `N(0, (σC)²)` to every coordinate.
pub fn add_noise(delta: &[f32], sigma: f32, clip_norm: f32, rng: &mut Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return delta.to_vec();
    }
    let std = sigma as f64 * clip_norm as f64;
    delta
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            (x as f64 + std * z) as f32
        })
        .collect()
}

/// Clip then noise. Also returns the post-clip norm for in-loop checks.
pub fn privatize(delta: &[f32], cfg: &DpConfig, rng: &mut Rng) -> (Vec<f32>, f64) {
    let clipped = clip_update(delta, cfg.clip_norm);
    let norm = l2_norm(&clipped);
    (add_noise(&clipped, cfg.noise_sigma, cfg.clip_norm, rng), norm)
}

/// Rényi orders `1.25, 1.5, …, 512`.
pub fn alpha_grid() -> impl Iterator<Item = f64> {
    (5..=2048).map(|i| i as f64 * 0.25)
}

/// `ε` for `rounds` compositions of the Gaussian mechanism with noise
/// multiplier `sigma` (sensitivity `C`, full participation):
/// `min_α R·α/(2σ²) + ln(1/δ)/(α−1)`. `σ = 0` gives `+∞`.
pub fn account_privacy(sigma: f64, rounds: usize, delta: f64) -> f64 {
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    let log_inv_delta = (1.0 / delta).ln();
    alpha_grid()
        .map(|a| rounds as f64 * a / (2.0 * sigma * sigma) + log_inv_delta / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}
