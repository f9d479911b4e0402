use serde::{Deserialize, Serialize};

use super::PrivacyError;
use crate::par::Exec;
use crate::params::ParamVector;
use crate::rng::normal_at;

const NOISE_CHUNK: usize = 4096;

/// Update transformations applied on the client before anything leaves it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrivacyConfig {
    /// L2 bound on an update; 0 disables clipping.
    pub clip_radius: f64,
    /// Gaussian noise multiplier; 0 disables noise.
    pub noise_scale: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl PrivacyConfig {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if !(self.clip_radius.is_finite() && self.clip_radius >= 0.0) {
            return Err(PrivacyError::InvalidConfig(
                "clipRadius must be finite and non-negative".into(),
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(PrivacyError::InvalidConfig(
                "noiseScale must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Standard deviation of the added noise.
    pub fn noise_std(&self) -> f64 {
        if self.clip_radius > 0.0 {
            self.noise_scale * self.clip_radius
        } else {
            self.noise_scale
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.clip_radius == 0.0 && self.noise_scale == 0.0
    }
}

/// Scales `update` onto the L2 ball of radius `clip_radius`; 0 means no clipping.
pub fn clip_update(update: &ParamVector, clip_radius: f64) -> Result<ParamVector, PrivacyError> {
    if clip_radius == 0.0 {
        return Ok(update.clone());
    }
    let norm = update.l2_norm();
    if !norm.is_finite() {
        return Err(PrivacyError::NonFiniteNorm);
    }
    if norm <= clip_radius {
        return Ok(update.clone());
    }
    let factor = clip_radius / norm;
    let mut out = update.clone();
    for v in out.values_mut() {
        *v *= factor;
    }
    // Rounding can leave the product a few ulps above the radius; pull it
    // back in, aiming slightly low so each step makes progress.
    loop {
        let n2 = out.l2_norm();
        if n2 <= clip_radius {
            break;
        }
        let shrink = clip_radius / n2 * (1.0 - 2.0 * f64::EPSILON);
        for v in out.values_mut() {
            *v *= shrink;
        }
    }
    Ok(out)
}

/// Adds `N(0, std^2)` to every coordinate, where `std` follows [`PrivacyConfig::noise_std`].
///
/// Coordinate `i` uses normal draw `i` of the stream keyed on `cfg.noise_seed`,
/// so the output does not depend on how the work is split.
pub fn add_noise(update: &ParamVector, cfg: &PrivacyConfig) -> Result<ParamVector, PrivacyError> {
    add_noise_with(Exec::default(), update, cfg)
}

pub fn add_noise_with(
    exec: Exec,
    update: &ParamVector,
    cfg: &PrivacyConfig,
) -> Result<ParamVector, PrivacyError> {
    cfg.validate()?;
    let std = cfg.noise_std();
    if std == 0.0 {
        return Ok(update.clone());
    }
    let mut out = update.clone();
    let key = cfg.noise_seed;
    exec.for_each_chunk_mut(out.values_mut(), NOISE_CHUNK, |c, chunk| {
        let base = (c * NOISE_CHUNK) as u64;
        for (i, v) in chunk.iter_mut().enumerate() {
            *v += std * normal_at(key, base + i as u64);
        }
    });
    out.ensure_finite()?;
    Ok(out)
}

/// Clip, then noise.
pub fn privatize(update: &ParamVector, cfg: &PrivacyConfig) -> Result<ParamVector, PrivacyError> {
    let clipped = clip_update(update, cfg.clip_radius)?;
    add_noise(&clipped, cfg)
}
