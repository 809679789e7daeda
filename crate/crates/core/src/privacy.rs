//! Payload sanitization before transmission: clip to an L2 norm bound, then
//! add Gaussian noise scaled by `noise_multiplier * clip_norm`.
//!
//! This is a plain Gaussian mechanism without a composition accountant;
//! the configuration exposes raw `(clip_norm, noise_multiplier)` and makes
//! no epsilon claims.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Sanitizer configuration plus its private noise stream.
#[derive(Debug, Clone)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub enabled: bool,
    rng: ChaCha8Rng,
    calls: u64,
}

impl DpConfig {
    pub fn new(clip_norm: f64, noise_multiplier: f64, enabled: bool, seed: u64) -> Result<Self> {
        if enabled && clip_norm <= 0.0 {
            return Err(Error::Value(format!("clip norm must be positive, got {clip_norm}")));
        }
        if noise_multiplier < 0.0 {
            return Err(Error::Value(format!(
                "noise multiplier must be nonnegative, got {noise_multiplier}"
            )));
        }
        Ok(Self {
            clip_norm,
            noise_multiplier,
            enabled,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xd9_5a11),
            calls: 0,
        })
    }

    pub fn disabled() -> Self {
        Self::new(1.0, 0.0, false, 0).expect("valid defaults")
    }

    /// Number of sanitize calls performed so far; audited against the
    /// ledger's sanitized-payload count.
    pub fn calls(&self) -> u64 {
        self.calls
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Clips `v` to the configured norm bound and adds `N(0, (sigma * C)^2)`
/// noise per coordinate. A disabled config passes the payload through
/// unchanged (and does not count as a sanitize call).
pub fn sanitize(v: &[f64], cfg: &mut DpConfig) -> Result<Vec<f64>> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("sanitizer input".into()));
    }
    if !cfg.enabled {
        return Ok(v.to_vec());
    }
    cfg.calls += 1;
    let norm = l2_norm(v);
    let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    let mut out: Vec<f64> = v.iter().map(|x| x * scale).collect();
    if cfg.noise_multiplier > 0.0 {
        let std = cfg.noise_multiplier * cfg.clip_norm;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Value(e.to_string()))?;
        for x in out.iter_mut() {
            *x += normal.sample(&mut cfg.rng);
        }
    }
    Ok(out)
}

/// Norm of the clipped payload; never exceeds the bound.
pub fn clipped_norm_bound(v: &[f64], clip_norm: f64) -> f64 {
    let norm = l2_norm(v);
    if norm > clip_norm {
        clip_norm
    } else {
        norm
    }
}
