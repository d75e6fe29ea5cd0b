use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Patch;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate: bool,
    /// Multiplicative jitter drawn from `1 ± intensity_jitter`.
    pub intensity_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotate: true, intensity_jitter: 0.05 }
    }
}

/// Random in-plane quarter turn (square patches only) plus intensity jitter,
/// result clamped to `[0, 1]`.
pub fn augment_patch(p: &Patch, cfg: &AugmentConfig, rng: &mut Rng) -> Patch {
    let [d, h, w] = p.shape;
    let turns = if cfg.rotate && h == w { rng.random_range(0..4u8) } else { 0 };
    let scale = if cfg.intensity_jitter > 0.0 {
        rng.random_range(1.0 - cfg.intensity_jitter..=1.0 + cfg.intensity_jitter) as f32
    } else {
        1.0
    };
    let mut data = Vec::with_capacity(p.data.len());
    for c in 0..p.channels {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match turns {
                        0 => (y, x),
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (h - 1 - x, y),
                    };
                    data.push((p.get(c, z, sy, sx) * scale).clamp(0.0, 1.0));
                }
            }
        }
    }
    Patch::new(p.channels, p.shape, data)
}
