use serde::{Deserialize, Serialize};

use super::{PreprocessError, Result};
use crate::store::{Volume, VoxelData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperClip {
    Absolute(f64),
    /// Intensity above which this percentage of the volume's voxels lie.
    TopPercent(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormParams {
    pub lower_clip: f64,
    pub upper_clip: UpperClip,
    pub invert: bool,
}

impl Default for NormParams {
    fn default() -> Self {
        Self { lower_clip: 0.0, upper_clip: UpperClip::TopPercent(1.0), invert: false }
    }
}

/// Clip window resolved against one volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormWindow {
    pub lower: f64,
    pub upper: f64,
    pub invert: bool,
}

impl NormWindow {
    pub fn is_degenerate(&self) -> bool {
        !(self.upper > self.lower)
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let x = (v.clamp(self.lower, self.upper) - self.lower) / (self.upper - self.lower);
        if self.invert {
            1.0 - x
        } else {
            x
        }
    }
}

impl NormParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lower_clip.is_finite() {
            return Err(PreprocessError::InvalidParams("lower clip must be finite".into()));
        }
        match self.upper_clip {
            UpperClip::TopPercent(q) if !(q > 0.0 && q < 100.0) => {
                Err(PreprocessError::InvalidParams(format!("top percentile {q} is outside (0, 100)")))
            }
            UpperClip::Absolute(u) if !u.is_finite() => {
                Err(PreprocessError::InvalidParams("upper clip must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Resolve the upper clip for `v`. A window with `upper <= lower` is
    /// returned as is and logged; patches cut with it are all zero.
    pub fn resolve(&self, v: &Volume) -> Result<NormWindow> {
        self.validate()?;
        let upper = match self.upper_clip {
            UpperClip::Absolute(u) => u,
            UpperClip::TopPercent(q) => top_percent_value(&v.data, q),
        };
        let w = NormWindow { lower: self.lower_clip, upper, invert: self.invert };
        if w.is_degenerate() {
            log::warn!("degenerate clip window [{}, {}]; patches will be zero", w.lower, w.upper);
        }
        Ok(w)
    }
}

/// Nearest-rank value at quantile `1 - q/100` of all voxels.
fn top_percent_value(data: &VoxelData, q: f64) -> f64 {
    let n = data.len();
    if n == 0 {
        return 0.0;
    }
    let rank = (((1.0 - q / 100.0) * n as f64).ceil() as usize).clamp(1, n);
    match data {
        VoxelData::U8(_) | VoxelData::U16(_) => {
            let bins = data.dtype().max_value() as usize + 1;
            let mut hist = vec![0usize; bins];
            for i in 0..n {
                hist[data.get(i) as usize] += 1;
            }
            let mut acc = 0;
            for (value, &c) in hist.iter().enumerate() {
                acc += c;
                if acc >= rank {
                    return value as f64;
                }
            }
            (bins - 1) as f64
        }
        VoxelData::F32(values) => {
            let mut sorted: Vec<f32> = values.clone();
            let (_, v, _) = sorted.select_nth_unstable_by(rank - 1, f32::total_cmp);
            *v as f64
        }
    }
}

/// Dense patch, channel-major then `(d, h, w)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Patch {
    pub fn new(channels: usize, shape: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * shape.iter().product::<usize>(), "patch data length");
        Self { channels, shape, data }
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.data[((c * self.shape[0] + z) * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Cut the patch at `origin`, clip to the window and rescale to `[0, 1]`.
pub fn extract_patch(v: &Volume, origin: [usize; 3], shape: [usize; 3], window: &NormWindow) -> Result<Patch> {
    let dims = v.dims();
    if origin.iter().zip(&shape).zip(&dims).any(|((o, s), d)| o + s > *d) {
        return Err(PreprocessError::OutOfBounds { origin, shape, dims });
    }
    let [pd, ph, pw] = shape;
    let mut data = Vec::with_capacity(v.channels * pd * ph * pw);
    for c in 0..v.channels {
        for z in origin[0]..origin[0] + pd {
            for y in origin[1]..origin[1] + ph {
                let start = v.index(c, z, y, origin[2]);
                for i in start..start + pw {
                    data.push(window.apply(v.data.get(i)) as f32);
                }
            }
        }
    }
    Ok(Patch::new(v.channels, shape, data))
}
