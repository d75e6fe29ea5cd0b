//! Patch encoders producing instance descriptors `h_j`, and the adapter
//! forward map `z = GeLU(W_enc h + b_enc)`.

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::preprocess::{extract_patch, NormWindow, Patch, PatchGrid, PreprocessError};
use crate::store::{FeatureBag, PatchCoord, StoreError, Volume};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("patch has {0} channels; at most 3 are supported")]
    TooManyChannels(usize),
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("external features bypass patch encoding; import the bag instead")]
    External,
    #[error("non-finite adapter output at unit {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Adaptive average pooling onto a fixed `(d, h, w)` grid per channel.
    PooledDownsample { grid: [usize; 3] },
    /// Intensity moments per channel plus shape statistics of bright voxels.
    Moments { order: usize, threshold: f64 },
    /// Seeded Gaussian projection of the pooled grid.
    RandomProjection { grid: [usize; 3], dim: usize, seed: u64 },
    /// Features computed elsewhere and imported as `.fbag` files.
    External { path: PathBuf, dim: usize },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Moments { order: 4, threshold: 0.5 }
    }
}

const CHANNELS: usize = 3;
const SHAPE_FEATURES: usize = 5;
const OBJECT_FEATURES: usize = 6;
/// Components smaller than this are treated as debris.
const MIN_OBJECT_VOXELS: usize = 8;

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::InvalidSpec(m.into()));
        match self {
            EncoderSpec::PooledDownsample { grid } | EncoderSpec::RandomProjection { grid, .. }
                if grid.iter().any(|&g| g == 0) =>
            {
                bad("pooling grid must be positive on every axis")
            }
            EncoderSpec::RandomProjection { dim: 0, .. } | EncoderSpec::External { dim: 0, .. } => {
                bad("feature dimension must be at least 1")
            }
            EncoderSpec::Moments { order, .. } if *order < 2 => bad("moment order must be at least 2"),
            EncoderSpec::Moments { threshold, .. } if !(0.0..=1.0).contains(threshold) => {
                bad("moments threshold must lie in [0, 1]")
            }
            _ => Ok(()),
        }
    }

    /// Output dimension `K`.
    pub fn dim(&self) -> usize {
        match self {
            EncoderSpec::PooledDownsample { grid } => CHANNELS * grid.iter().product::<usize>(),
            EncoderSpec::Moments { order, .. } => CHANNELS * (order + 1) + SHAPE_FEATURES + OBJECT_FEATURES,
            EncoderSpec::RandomProjection { dim, .. } | EncoderSpec::External { dim, .. } => *dim,
        }
    }
}

/// An encoder ready to run; holds the projection matrix when there is one.
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    projection: Option<Array2<f64>>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let projection = match &spec {
            EncoderSpec::RandomProjection { grid, dim, seed } => {
                let n_in = CHANNELS * grid.iter().product::<usize>();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                let scale = 1.0 / (n_in as f64).sqrt();
                Some(Array2::from_shape_simple_fn((*dim, n_in), || {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * scale
                }))
            }
            _ => None,
        };
        Ok(Self { spec, projection })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn encode(&self, p: &Patch) -> Result<Vec<f64>> {
        let rgb = replicate_channels(p)?;
        let h = match &self.spec {
            EncoderSpec::PooledDownsample { grid } => adaptive_avg_pool(&rgb, *grid),
            EncoderSpec::Moments { order, threshold } => moments_features(&rgb, *order, *threshold),
            EncoderSpec::RandomProjection { grid, .. } => {
                let pooled = Array1::from(adaptive_avg_pool(&rgb, *grid));
                self.projection.as_ref().expect("built in new").dot(&pooled).to_vec()
            }
            EncoderSpec::External { .. } => return Err(EncoderError::External),
        };
        debug_assert_eq!(h.len(), self.dim());
        Ok(h)
    }
}

/// One channel becomes three copies; two channels become `(c1, c1, c2)`.
pub fn replicate_channels(p: &Patch) -> Result<Patch> {
    let order: &[usize] = match p.channels {
        1 => &[0, 0, 0],
        2 => &[0, 0, 1],
        3 => &[0, 1, 2],
        n => return Err(EncoderError::TooManyChannels(n)),
    };
    let data = order.iter().flat_map(|&c| p.channel(c).iter().copied()).collect();
    Ok(Patch::new(CHANNELS, p.shape, data))
}

fn pool_bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out).map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out))).collect()
}

/// Adaptive average pooling: bin `i` of `out` covers
/// `[floor(i*L/out), ceil((i+1)*L/out))`.
pub fn adaptive_avg_pool(p: &Patch, grid: [usize; 3]) -> Vec<f64> {
    let bins: Vec<Vec<(usize, usize)>> = (0..3).map(|a| pool_bins(p.shape[a], grid[a])).collect();
    let mut out = Vec::with_capacity(p.channels * grid.iter().product::<usize>());
    for c in 0..p.channels {
        for &(z0, z1) in &bins[0] {
            for &(y0, y1) in &bins[1] {
                for &(x0, x1) in &bins[2] {
                    let mut s = 0.0;
                    for z in z0..z1 {
                        for y in y0..y1 {
                            for x in x0..x1 {
                                s += p.get(c, z, y, x) as f64;
                            }
                        }
                    }
                    out.push(s / ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
    }
    out
}

fn moments_features(p: &Patch, order: usize, threshold: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(CHANNELS * (order + 1) + SHAPE_FEATURES + OBJECT_FEATURES);
    for c in 0..p.channels {
        let x = p.channel(c);
        let n = x.len() as f64;
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let central = |k: i32| x.iter().map(|&v| (v as f64 - mean).powi(k)).sum::<f64>() / n;
        let var = central(2);
        let sd = var.sqrt();
        out.push(mean);
        out.push(sd);
        for k in 3..=order as i32 {
            out.push(if sd > 1e-12 { central(k) / sd.powi(k) } else { 0.0 });
        }
        out.push(x.iter().filter(|&&v| v as f64 >= threshold).count() as f64 / n);
    }
    // shape statistics on the mean over channels
    let voxels = p.voxels_per_channel();
    let bright: Vec<bool> = (0..voxels)
        .map(|i| (0..p.channels).map(|c| p.data[c * voxels + i] as f64).sum::<f64>() / p.channels as f64 >= threshold)
        .collect();
    let scale = *p.shape.iter().max().unwrap() as f64;
    let all: Vec<[f64; 3]> = bright
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| coord_of(i, p.shape))
        .collect();
    out.extend(shape_features(&all, p.shape[0] == 1, scale));
    out.extend(object_features(&bright, p.shape));
    out
}

fn coord_of(i: usize, shape: [usize; 3]) -> [f64; 3] {
    let x = i % shape[2];
    let y = (i / shape[2]) % shape[1];
    let z = i / (shape[1] * shape[2]);
    [z as f64, y as f64, x as f64]
}

/// `[sqrt l1, sqrt l2, sqrt l3] / scale` plus `l2/l1` and `lmin/l1`, where
/// `lmin` is `l2` for planar patches.
fn shape_features(points: &[[f64; 3]], planar: bool, scale: f64) -> [f64; SHAPE_FEATURES] {
    if points.len() < 2 {
        return [0.0; SHAPE_FEATURES];
    }
    let l = coordinate_covariance_eigenvalues(points);
    if l[0] <= 1e-12 {
        return [0.0; SHAPE_FEATURES];
    }
    let lmin = if planar { l[1] } else { l[2] };
    [l[0].sqrt() / scale, l[1].sqrt() / scale, l[2].sqrt() / scale, l[1] / l[0], lmin / l[0]]
}

/// Descending eigenvalues of the covariance of the given coordinates.
pub fn coordinate_covariance_eigenvalues(points: &[[f64; 3]]) -> [f64; 3] {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a] / n;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for p in points {
        for a in 0..3 {
            for b in a..3 {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]) / n;
            }
        }
    }
    for a in 0..3 {
        for b in 0..a {
            cov[a][b] = cov[b][a];
        }
    }
    symmetric_eigenvalues(cov)
}

/// Cyclic Jacobi rotations on a symmetric 3x3 matrix; eigenvalues descending.
fn symmetric_eigenvalues(mut m: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..64 {
        let off = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
        let diag = m[0][0].powi(2) + m[1][1].powi(2) + m[2][2].powi(2);
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if m[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = [[0.0; 3]; 3];
            r[0][0] = 1.0;
            r[1][1] = 1.0;
            r[2][2] = 1.0;
            r[p][p] = c;
            r[q][q] = c;
            r[p][q] = s;
            r[q][p] = -s;
            // m <- r^T m r
            let mut tmp = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    tmp[i][j] = (0..3).map(|k| m[i][k] * r[k][j]).sum();
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = (0..3).map(|k| r[k][i] * tmp[k][j]).sum();
                }
            }
        }
    }
    let mut l = [m[0][0].max(0.0), m[1][1].max(0.0), m[2][2].max(0.0)];
    l.sort_by(|a, b| b.total_cmp(a));
    l
}

/// Per-object elongation summary over 26-connected bright components:
/// count per 1000 voxels, mean/min/max of `lmin/l1`, fraction of objects
/// with `lmin/l1 < 0.75`, and mean object size relative to the patch.
/// Objects cut by the patch boundary are left out of the shape statistics
/// unless no object lies fully inside.
fn object_features(bright: &[bool], shape: [usize; 3]) -> [f64; OBJECT_FEATURES] {
    let planar = shape[0] == 1;
    let mut seen = vec![false; bright.len()];
    let mut ratios = Vec::new();
    let mut sizes = Vec::new();
    let mut interior = Vec::new();
    let mut stack = Vec::new();
    let mut points = Vec::new();
    for start in 0..bright.len() {
        if !bright[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        points.clear();
        let mut cut = false;
        while let Some(i) = stack.pop() {
            let [z, y, x] = coord_of(i, shape);
            points.push([z, y, x]);
            cut |= [z, y, x].iter().zip(shape).any(|(&c, n)| n > 1 && (c == 0.0 || c == (n - 1) as f64));
            let (z, y, x) = (z as isize, y as isize, x as isize);
            for dz in -1..=1isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (zz, yy, xx) = (z + dz, y + dy, x + dx);
                        if zz < 0 || yy < 0 || xx < 0 {
                            continue;
                        }
                        let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
                        if zz >= shape[0] || yy >= shape[1] || xx >= shape[2] {
                            continue;
                        }
                        let j = (zz * shape[1] + yy) * shape[2] + xx;
                        if bright[j] && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        if points.len() < MIN_OBJECT_VOXELS {
            continue;
        }
        let l = coordinate_covariance_eigenvalues(&points);
        if l[0] <= 1e-12 {
            continue;
        }
        ratios.push(if planar { l[1] } else { l[2] } / l[0]);
        sizes.push(l[0].sqrt());
        interior.push(!cut);
    }
    if ratios.is_empty() {
        return [0.0; OBJECT_FEATURES];
    }
    if interior.iter().any(|&b| b) {
        let keep = |v: Vec<f64>| v.into_iter().zip(&interior).filter(|(_, &k)| k).map(|(x, _)| x).collect();
        ratios = keep(ratios);
        sizes = keep(sizes);
    }
    let n = ratios.len() as f64;
    let total: usize = shape.iter().product();
    let scale = *shape.iter().max().unwrap() as f64;
    [
        1000.0 * n / total as f64,
        ratios.iter().sum::<f64>() / n,
        ratios.iter().copied().fold(f64::INFINITY, f64::min),
        ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ratios.iter().filter(|&&r| r < 0.75).count() as f64 / n,
        sizes.iter().sum::<f64>() / n / scale,
    ]
}

/// Trainable adapter weights: `W_enc` is `256 x K`, `b_enc` has 256 entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
}

pub const ADAPTER_DIM: usize = 256;

impl AdapterParams {
    pub fn zeros(k: usize) -> Self {
        Self { w_enc: Array2::zeros((ADAPTER_DIM, k)), b_enc: Array1::zeros(ADAPTER_DIM) }
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }
}

/// Standard normal CDF.
#[inline]
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact GeLU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * phi(x)
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    phi(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn adapter_forward(h: &[f64], a: &AdapterParams) -> Result<Vec<f64>> {
    if h.len() != a.input_dim() {
        return Err(EncoderError::DimMismatch { expected: a.input_dim(), actual: h.len() });
    }
    let pre = a.w_enc.dot(&ndarray::ArrayView1::from(h)) + &a.b_enc;
    let z: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinite(i));
    }
    Ok(z)
}

/// Encode every grid entry of `v`; rows follow grid order.
pub fn encode_bag(
    sample_id: &str,
    v: &Volume,
    grid: &PatchGrid,
    encoder: &Encoder,
    window: &NormWindow,
) -> Result<FeatureBag> {
    let rows: Vec<Vec<f64>> = grid
        .entries
        .par_iter()
        .map(|&origin| encoder.encode(&extract_patch(v, origin, grid.patch_shape, window)?))
        .collect::<Result<_>>()?;
    let coords = grid.entries.iter().map(|&o| PatchCoord::new(o, grid.patch_shape)).collect();
    if rows.is_empty() {
        return Ok(FeatureBag::new(sample_id, encoder.dim(), Vec::new(), coords)?);
    }
    Ok(FeatureBag::from_rows(sample_id, &rows, coords)?)
}

/// Check an imported bag against the configured feature dimension.
pub fn check_external(bag: &FeatureBag, spec: &EncoderSpec) -> Result<()> {
    if bag.dim() != spec.dim() {
        return Err(EncoderError::DimMismatch { expected: spec.dim(), actual: bag.dim() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{rasterize_spheroid, Spheroid};
    use crate::store::DType;

    fn patch_from_volume(v: &Volume) -> Patch {
        let w = NormWindow { lower: 0.0, upper: 1000.0, invert: false };
        extract_patch(v, [0, 0, 0], v.dims(), &w).unwrap()
    }

    #[test]
    fn constant_patch_pools_to_constant() {
        let p = Patch::new(1, [4, 6, 5], vec![0.3; 120]);
        let h = adaptive_avg_pool(&replicate_channels(&p).unwrap(), [2, 3, 2]);
        assert_eq!(h.len(), 36);
        assert!(h.iter().all(|&x| (x - 0.3f32 as f64).abs() < 1e-12));
    }

    #[test]
    fn pool_to_single_bin_is_mean() {
        let vals = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.9];
        let p = Patch::new(1, [2, 2, 2], vals.to_vec());
        let e = Encoder::new(EncoderSpec::PooledDownsample { grid: [1, 1, 1] }).unwrap();
        let h = e.encode(&p).unwrap();
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
        assert_eq!(h.len(), 3);
        for x in h {
            assert!((x - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_bins_follow_floor_ceil_rule() {
        assert_eq!(pool_bins(5, 3), vec![(0, 2), (1, 4), (3, 5)]);
        assert_eq!(pool_bins(1, 2), vec![(0, 1), (0, 1)]);
    }

    #[test]
    fn dual_channel_replication() {
        let p = Patch::new(2, [1, 1, 2], vec![0.1, 0.2, 0.7, 0.8]);
        let r = replicate_channels(&p).unwrap();
        assert_eq!(r.data, vec![0.1, 0.2, 0.1, 0.2, 0.7, 0.8]);
        assert!(replicate_channels(&Patch::new(4, [1, 1, 1], vec![0.0; 4])).is_err());
    }

    #[test]
    fn eigen_solver_matches_diagonal_and_rotated() {
        let d = symmetric_eigenvalues([[2.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(d, [5.0, 2.0, 1.0]);
        // [[2,1,0],[1,2,0],[0,0,7]] has eigenvalues 7, 3, 1
        let r = symmetric_eigenvalues([[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 7.0]]);
        for (a, b) in r.iter().zip([7.0, 3.0, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
    }

    fn shell(e: f64, axis: [f64; 3]) -> Volume {
        let mut v = Volume::zeros(DType::U16, 1, [48, 48, 48], [1.0; 3]).unwrap();
        let a = 16.0;
        let s = Spheroid {
            center: [24.0, 24.0, 24.0],
            semi_major: a,
            semi_minor: a * (1.0 - e * e).sqrt(),
            axis,
            thickness: 2.0,
            cell_type: 0,
            intensity: 900.0,
        };
        rasterize_spheroid(&s, &mut v);
        v
    }

    #[test]
    fn moments_separate_sphere_from_elongated_spheroid() {
        let ratio = |v: &Volume| {
            let pts: Vec<[f64; 3]> = (0..v.data.len())
                .filter(|&i| v.data.get(i) > 0.0)
                .map(|i| coord_of(i, v.dims()))
                .collect();
            let l = coordinate_covariance_eigenvalues(&pts);
            l[0] / l[2]
        };
        let sphere = shell(0.0, [1.0, 0.0, 0.0]);
        let long = shell(0.9, [0.0, 0.6, 0.8]);
        assert!((ratio(&sphere) - 1.0).abs() < 0.05, "{}", ratio(&sphere));
        assert!(ratio(&long) > 3.0, "{}", ratio(&long));

        let e = Encoder::new(EncoderSpec::Moments { order: 4, threshold: 0.5 }).unwrap();
        let hs = e.encode(&patch_from_volume(&sphere)).unwrap();
        let hl = e.encode(&patch_from_volume(&long)).unwrap();
        let base = CHANNELS * 5;
        // lmin/l1 from the whole-patch shape block
        assert!(hs[base + 4] > 0.9 && hl[base + 4] < 0.4);
        // single object in each
        let obj = base + SHAPE_FEATURES;
        assert!((hs[obj + 1] - hs[base + 4]).abs() < 1e-9);
        assert_eq!(hl[obj + 4], 1.0);
        assert_eq!(hs[obj + 4], 0.0);
    }

    #[test]
    fn moments_invariant_to_axis_flips() {
        let v = shell(0.8, [0.3, 0.5, 0.81]);
        let p = patch_from_volume(&v);
        let [d, h, w] = p.shape;
        let mut flipped = Vec::with_capacity(p.data.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    flipped.push(p.get(0, d - 1 - z, y, w - 1 - x));
                }
            }
        }
        let e = Encoder::new(EncoderSpec::default()).unwrap();
        let a = e.encode(&p).unwrap();
        let b = e.encode(&Patch::new(1, p.shape, flipped)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15, "{:e}", gelu(1.0) - 0.841_344_746_068_542_9);
        assert!(gelu(-20.0).abs() < 1e-8);
        let fd = (gelu(0.3 + 1e-6) - gelu(0.3 - 1e-6)) / 2e-6;
        assert!((fd - gelu_derivative(0.3)).abs() < 1e-8);
    }

    #[test]
    fn zero_adapter_gives_zero() {
        let a = AdapterParams::zeros(5);
        assert_eq!(adapter_forward(&[1.0, 2.0, 3.0, 4.0, 5.0], &a).unwrap(), vec![0.0; 256]);
        assert!(adapter_forward(&[1.0], &a).is_err());
    }

    #[test]
    fn random_projection_is_seeded() {
        let spec = EncoderSpec::RandomProjection { grid: [1, 2, 2], dim: 7, seed: 9 };
        let p = Patch::new(1, [2, 4, 4], (0..32).map(|i| i as f32 / 32.0).collect());
        let a = Encoder::new(spec.clone()).unwrap().encode(&p).unwrap();
        let b = Encoder::new(spec).unwrap().encode(&p).unwrap();
        assert_eq!(a.len(), 7);
        assert_eq!(a, b);
    }

    #[test]
    fn bag_rows_follow_grid_order() {
        use crate::preprocess::{build_patch_grid, MaskStack, PatchMode};
        let mut v = Volume::zeros(DType::U16, 1, [1, 8, 24], [1.0; 3]).unwrap();
        for x in 0..24 {
            for y in 0..8 {
                let i = v.index(0, 0, y, x);
                v.data.set(i, (x / 8 * 100) as f64);
            }
        }
        let grid = build_patch_grid(&MaskStack::full([1, 8, 24]), PatchMode::Planes2d, [1, 8, 8], [0, 0, 0]).unwrap();
        let e = Encoder::new(EncoderSpec::PooledDownsample { grid: [1, 1, 1] }).unwrap();
        let w = NormWindow { lower: 0.0, upper: 200.0, invert: false };
        let bag = encode_bag("s", &v, &grid, &e, &w).unwrap();
        assert_eq!(bag.len(), 3);
        let means: Vec<f32> = (0..3).map(|j| bag.row(j)[0]).collect();
        assert_eq!(means, vec![0.0, 0.5, 1.0]);
    }
}
