use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PreprocessError, Result};
use crate::store::Volume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegParams {
    /// Planes whose mean intensity falls below this are treated as air.
    pub air_mean_threshold: f64,
    /// Odd side length of the square median filter.
    pub median_kernel: usize,
    /// Blurred intensities at or above this are tissue.
    pub binarize_threshold: f64,
    /// Planes with fewer tissue pixels are dropped.
    pub min_tissue_area: usize,
    /// Pick the binarization threshold per plane with Otsu's method.
    pub auto_threshold: bool,
}

impl Default for SegParams {
    fn default() -> Self {
        Self { air_mean_threshold: 1.0, median_kernel: 3, binarize_threshold: 100.0, min_tissue_area: 100, auto_threshold: false }
    }
}

impl SegParams {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel == 0 || self.median_kernel % 2 == 0 {
            return Err(PreprocessError::InvalidParams(format!(
                "median kernel must be odd and >= 1, got {}",
                self.median_kernel
            )));
        }
        if !self.air_mean_threshold.is_finite() || !self.binarize_threshold.is_finite() {
            return Err(PreprocessError::InvalidParams("thresholds must be finite".into()));
        }
        Ok(())
    }
}

/// Per-plane tissue masks aligned with a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    dims: [usize; 3],
    mask: Vec<bool>,
    areas: Vec<usize>,
    kept_planes: Vec<usize>,
}

impl MaskStack {
    /// Build from raw plane masks; areas and kept planes are derived.
    pub fn from_mask(dims: [usize; 3], mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), dims[0] * dims[1] * dims[2], "mask length must match dims");
        let plane = dims[1] * dims[2];
        let areas: Vec<usize> =
            (0..dims[0]).map(|z| mask[z * plane..(z + 1) * plane].iter().filter(|&&m| m).count()).collect();
        let kept_planes = areas.iter().enumerate().filter(|(_, &a)| a > 0).map(|(z, _)| z).collect();
        Self { dims, mask, areas, kept_planes }
    }

    /// Every voxel is tissue.
    pub fn full(dims: [usize; 3]) -> Self {
        Self::from_mask(dims, vec![true; dims[0] * dims[1] * dims[2]])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn areas(&self) -> &[usize] {
        &self.areas
    }

    pub fn kept_planes(&self) -> &[usize] {
        &self.kept_planes
    }

    pub fn is_empty(&self) -> bool {
        self.kept_planes.is_empty()
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.mask[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn plane(&self, z: usize) -> &[bool] {
        let p = self.dims[1] * self.dims[2];
        &self.mask[z * p..(z + 1) * p]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    /// Largest plane by tissue area, ties broken by the lowest index.
    pub fn reference_plane(&self) -> Option<usize> {
        self.kept_planes.iter().copied().fold(None, |best: Option<usize>, z| match best {
            Some(b) if self.areas[b] >= self.areas[z] => Some(b),
            _ => Some(z),
        })
    }

    /// Copy keeping only the listed planes; every other plane is cleared.
    pub fn retain_planes(&self, planes: &[usize]) -> Self {
        let p = self.dims[1] * self.dims[2];
        let mut mask = vec![false; self.mask.len()];
        for &z in planes {
            if z < self.dims[0] {
                mask[z * p..(z + 1) * p].copy_from_slice(self.plane(z));
            }
        }
        Self::from_mask(self.dims, mask)
    }

    /// Copy keeping only planes `[0, depth)` counted from the top.
    pub fn truncate_depth(&self, depth: usize) -> Self {
        let planes: Vec<usize> = (0..depth.min(self.dims[0])).collect();
        self.retain_planes(&planes)
    }
}

/// Segment each plane: drop air planes, median-blur, binarize, fill the
/// interior of tissue contours, and drop planes with too little tissue.
pub fn segment_volume(v: &Volume, p: &SegParams) -> Result<MaskStack> {
    p.validate()?;
    let [d, h, w] = v.dims();
    let planes: Vec<Vec<bool>> = (0..d)
        .into_par_iter()
        .map(|z| {
            let gray: Vec<f64> =
                (0..h * w).map(|i| v.mean_intensity(z, i / w, i % w)).collect();
            let mean = gray.iter().sum::<f64>() / gray.len().max(1) as f64;
            if mean < p.air_mean_threshold {
                return vec![false; h * w];
            }
            let blurred = median_filter(&gray, h, w, p.median_kernel);
            let threshold = if p.auto_threshold { otsu_threshold(&blurred) } else { p.binarize_threshold };
            let mut bin: Vec<bool> = blurred.iter().map(|&x| x >= threshold).collect();
            fill_holes(&mut bin, h, w);
            let area = bin.iter().filter(|&&b| b).count();
            if area < p.min_tissue_area {
                return vec![false; h * w];
            }
            bin
        })
        .collect();
    Ok(MaskStack::from_mask([d, h, w], planes.concat()))
}

fn median_filter(img: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    if k == 1 {
        return img.to_vec();
    }
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = vec![0.0; img.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    window.push(img[yy * w + xx]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
            out[y as usize * w + x as usize] = *m;
        }
    }
    out
}

/// Background regions not connected to the plane border are enclosed by a
/// tissue contour and become tissue.
fn fill_holes(bin: &mut [bool], h: usize, w: usize) {
    let mut outside = vec![false; bin.len()];
    let mut queue = VecDeque::new();
    let seed = |i: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
        if !bin[i] && !outside[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    };
    for x in 0..w {
        seed(x, &mut outside, &mut queue);
        seed((h - 1) * w + x, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(y * w, &mut outside, &mut queue);
        seed(y * w + w - 1, &mut outside, &mut queue);
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !bin[j] && !outside[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    for (b, o) in bin.iter_mut().zip(outside) {
        if !o {
            *b = true;
        }
    }
}

/// Otsu threshold over a 256-bin histogram spanning the data range.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return hi;
    }
    const BINS: usize = 256;
    let scale = (BINS - 1) as f64 / (hi - lo);
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[((v - lo) * scale).round() as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0usize, -1.0);
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    // first bin above the split
    lo + (best as f64 + 1.0) / scale
}
