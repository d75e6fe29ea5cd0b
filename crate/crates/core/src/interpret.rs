//! Integrated gradients over instance features, score normalization, cohort
//! grouping of instances and overlap-averaged heatmap volumes.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mil::{MilError, MilModel};
use crate::preprocess::PatchGrid;
use crate::store::{DType, Volume, VoxelData};

#[derive(Debug, thiserror::Error)]
pub enum InterpretError {
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error("non-finite gradient at step {0}")]
    NonFinite(usize),
    #[error("need at least 10 instances for decile grouping, got {0}")]
    TooFewInstances(usize),
    #[error("{scores} scores for a grid of {entries} entries")]
    GridMismatch { scores: usize, entries: usize },
    #[error("grid was built for {grid:?}, volume is {volume:?}")]
    DimsMismatch { grid: [usize; 3], volume: [usize; 3] },
    #[error(transparent)]
    Model(#[from] MilError),
}

pub type Result<T> = std::result::Result<T, InterpretError>;

pub const DEFAULT_STEPS: usize = 128;

/// Which network output is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IgTarget {
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgResult {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub steps: usize,
    pub f_x: f64,
    pub f_0: f64,
    pub completeness_gap: f64,
}

fn target_value(model: &MilModel, h: ArrayView2<f64>, target: IgTarget) -> Result<(f64, f64)> {
    let c = model.forward(h, None)?;
    Ok(match target {
        IgTarget::Probability => (c.p, c.p * (1.0 - c.p)),
        IgTarget::Logit => (c.logit, 1.0),
    })
}

/// Per-instance IG with a zero baseline, all instances scaled together:
/// `IG_j = sum_k h_jk * (1/M) sum_{m=1..M} dF(m/M * H)/dh_jk`.
pub fn integrated_gradients(model: &MilModel, h: ArrayView2<f64>, steps: usize, target: IgTarget) -> Result<IgResult> {
    if steps == 0 {
        return Err(InterpretError::ZeroSteps);
    }
    let grads: Vec<Array2<f64>> = (1..=steps)
        .into_par_iter()
        .map(|m| {
            let scaled = h.mapv(|v| v * m as f64 / steps as f64);
            let c = model.forward(scaled.view(), None)?;
            let dlogit = match target {
                IgTarget::Probability => c.p * (1.0 - c.p),
                IgTarget::Logit => 1.0,
            };
            let (_, dh) = model.backward(scaled.view(), &c, None, dlogit, true);
            let dh = dh.expect("requested");
            if dh.iter().any(|v| !v.is_finite()) {
                return Err(InterpretError::NonFinite(m));
            }
            Ok(dh)
        })
        .collect::<Result<_>>()?;
    let mut avg = Array2::<f64>::zeros(h.raw_dim());
    for g in &grads {
        avg += g;
    }
    avg /= steps as f64;
    let raw: Vec<f64> = (&avg * &h).rows().into_iter().map(|r| r.sum()).collect();
    let (f_x, _) = target_value(model, h, target)?;
    let (f_0, _) = target_value(model, Array2::zeros(h.raw_dim()).view(), target)?;
    let completeness_gap = (raw.iter().sum::<f64>() - (f_x - f_0)).abs();
    Ok(IgResult { normalized: normalize_ig(&raw), raw, steps, f_x, f_0, completeness_gap })
}

/// Negatives divided by the largest negative magnitude, positives by the
/// largest positive value; zero stays zero.
pub fn normalize_ig(raw: &[f64]) -> Vec<f64> {
    let max_pos = raw.iter().copied().filter(|&v| v > 0.0).fold(0.0, f64::max);
    let max_neg = raw.iter().copied().filter(|&v| v < 0.0).fold(0.0, |a: f64, v| a.max(-v));
    raw.iter()
        .map(|&v| {
            if v > 0.0 {
                v / max_pos
            } else if v < 0.0 {
                v / max_neg
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IgGroup {
    High,
    Middle,
    Low,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleGroupStats {
    pub sample_id: String,
    pub instances: usize,
    pub high_fraction: f64,
    pub middle_fraction: f64,
    pub low_fraction: f64,
    /// `None` when the sample has no low-group instances.
    pub high_low_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgGroups {
    /// Per sample, one group per instance, in input order.
    pub memberships: Vec<Vec<IgGroup>>,
    pub stats: Vec<SampleGroupStats>,
    pub band: usize,
}

/// Pool scores across samples: top decile is `High`, bottom decile `Low`,
/// and the decile-sized band of ranks centered where 0 falls is `Middle`.
/// Ties are broken by (sample, instance) order.
pub fn ig_group_assignment(samples: &[(String, Vec<f64>)]) -> Result<IgGroups> {
    let pooled: Vec<(f64, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, (_, v))| v.iter().enumerate().map(move |(j, &x)| (x, s, j)))
        .collect();
    let n = pooled.len();
    if n < 10 {
        return Err(InterpretError::TooFewInstances(n));
    }
    let band = ((n as f64) / 10.0).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pooled[a].0.total_cmp(&pooled[b].0).then(a.cmp(&b)));
    let mut memberships: Vec<Vec<IgGroup>> = samples.iter().map(|(_, v)| vec![IgGroup::Other; v.len()]).collect();
    let below_zero = pooled.iter().filter(|p| p.0 < 0.0).count();
    let at_zero = pooled.iter().filter(|p| p.0 == 0.0).count();
    // center of the zero block in rank space
    let center = below_zero as f64 + at_zero as f64 / 2.0;
    let mid_start = ((center - band as f64 / 2.0).round().max(0.0) as usize).min(n - band);
    let mut assign = |rank: usize, g: IgGroup| {
        let (_, s, j) = pooled[order[rank]];
        memberships[s][j] = g;
    };
    for r in mid_start..mid_start + band {
        assign(r, IgGroup::Middle);
    }
    for r in 0..band {
        assign(r, IgGroup::Low);
    }
    for r in n - band..n {
        assign(r, IgGroup::High);
    }
    let stats = samples
        .iter()
        .zip(&memberships)
        .map(|((id, _), m)| {
            let count = |g| m.iter().filter(|&&x| x == g).count();
            let total = m.len().max(1) as f64;
            let (hi, mid, lo) = (count(IgGroup::High), count(IgGroup::Middle), count(IgGroup::Low));
            SampleGroupStats {
                sample_id: id.clone(),
                instances: m.len(),
                high_fraction: hi as f64 / total,
                middle_fraction: mid as f64 / total,
                low_fraction: lo as f64 / total,
                high_low_ratio: (lo > 0).then(|| hi as f64 / lo as f64),
            }
        })
        .collect();
    Ok(IgGroups { memberships, stats, band })
}

/// Normalized per-voxel attribution aligned with a source volume.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapVolume {
    pub dims: [usize; 3],
    /// Normalized values; `NaN` where no patch covers the voxel.
    pub values: Vec<f32>,
    pub coverage: Vec<u16>,
}

impl HeatmapVolume {
    pub fn to_volumes(&self, voxel_size: [f32; 3]) -> (Volume, Volume) {
        let values = Volume::new(1, self.dims, voxel_size, VoxelData::F32(self.values.clone()))
            .expect("dims consistent");
        let coverage = Volume::new(1, self.dims, voxel_size, VoxelData::U16(self.coverage.clone()))
            .expect("dims consistent");
        debug_assert_eq!(coverage.dtype(), DType::U16);
        (values, coverage)
    }
}

/// Average the raw scores of every patch covering each voxel, then
/// normalize over the covered voxels.
pub fn build_heatmap(dims: [usize; 3], grid: &PatchGrid, raw: &[f64]) -> Result<HeatmapVolume> {
    if raw.len() != grid.entries.len() {
        return Err(InterpretError::GridMismatch { scores: raw.len(), entries: grid.entries.len() });
    }
    if grid.volume_dims != dims {
        return Err(InterpretError::DimsMismatch { grid: grid.volume_dims, volume: dims });
    }
    let [d, h, w] = dims;
    let [pd, ph, pw] = grid.patch_shape;
    let planes: Vec<(Vec<f64>, Vec<u16>)> = (0..d)
        .into_par_iter()
        .map(|z| {
            let mut sum = vec![0.0; h * w];
            let mut cov = vec![0u16; h * w];
            for (e, &s) in grid.entries.iter().zip(raw) {
                if !(e[0]..e[0] + pd).contains(&z) {
                    continue;
                }
                for y in e[1]..e[1] + ph {
                    for x in e[2]..e[2] + pw {
                        sum[y * w + x] += s;
                        cov[y * w + x] = cov[y * w + x].saturating_add(1);
                    }
                }
            }
            (sum, cov)
        })
        .collect();
    let mut avg = Vec::with_capacity(d * h * w);
    let mut coverage = Vec::with_capacity(d * h * w);
    for (sum, cov) in planes {
        avg.extend(sum.iter().zip(&cov).map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }));
        coverage.extend(cov);
    }
    let covered: Vec<f64> = avg.iter().copied().filter(|v| !v.is_nan()).collect();
    let mut normalized = normalize_ig(&covered).into_iter();
    let values = avg
        .iter()
        .map(|v| if v.is_nan() { f32::NAN } else { normalized.next().unwrap() as f32 })
        .collect();
    Ok(HeatmapVolume { dims, values, coverage })
}
