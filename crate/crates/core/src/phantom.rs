//! Synthetic cohorts of hollow spheroid "cells".
//!
//! Each class is a mixture of cell types; each cell type draws eccentricity
//! and semi-major length from normal distributions. Cells are prolate
//! spheroids with a random orientation, rasterized as a shell of fixed
//! thickness into a single-channel `u16` volume whose background is 0.
//! Overlapping cells follow last-writer-wins.
//!
//! A label volume (`u8`, 0 = background, `1 + type` = shell voxel of that
//! type) is produced alongside each intensity volume. It drives the
//! targeted-plane selection hook and the morphology checks on attributions.
//!
//! Survival cohorts attach a per-sample risk score, a Cox-exponential event
//! time `-ln(U) / (lambda * exp(r))`, and a single global censoring cutoff.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Rng};
use crate::store::{self, CohortManifest, DType, Event, ManifestRecord, Volume, VoxelData};

const SURVIVAL_STREAM_SALT: u64 = 0x5355_5256;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom specification: {0}")]
    InvalidSpec(String),
    #[error("volume dims {dims:?} are too small to place a cell of type {cell_type:?}")]
    DimsTooSmall { dims: [usize; 3], cell_type: String },
    #[error(transparent)]
    Store(#[from] store::StoreError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normal {
    pub mean: f64,
    pub sd: f64,
}

impl Normal {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.sd * z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellTypeSpec {
    pub name: String,
    pub eccentricity: Normal,
    /// Semi-major axis length in voxels.
    pub semi_major: Normal,
    /// Shell thickness in voxels.
    pub shell_thickness: f64,
    /// Cell intensity is drawn uniformly from `[lo, hi]`.
    pub intensity: [f64; 2],
    /// Optional fractional depth band `[lo, hi)` restricting cell centres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_range: Option<[f64; 2]>,
}

impl CellTypeSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PhantomError::InvalidSpec(format!("cell type {:?}: {m}", self.name)));
        if !(self.shell_thickness > 0.0) {
            return bad("shell thickness must be positive");
        }
        if self.eccentricity.sd < 0.0 || self.semi_major.sd < 0.0 {
            return bad("standard deviations must be non-negative");
        }
        let [lo, hi] = self.intensity;
        if !(lo > 0.0 && lo <= hi && hi <= u16::MAX as f64) {
            return bad("intensity band must satisfy 0 < lo <= hi <= 65535");
        }
        if let Some([a, b]) = self.depth_range {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return bad("depth range must satisfy 0 <= lo < hi <= 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Fraction of cells per cell type, in cell-type order.
    pub mixture: Vec<f64>,
    pub cells_per_volume: usize,
    /// (depth, height, width) in voxels.
    pub volume_dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub cell_types: Vec<CellTypeSpec>,
    pub classes: Vec<ClassSpec>,
    pub voxel_size: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalSpec {
    /// Risk-score distribution per class.
    pub risk: Vec<Normal>,
    /// Baseline hazard in 1/months.
    pub baseline_hazard: f64,
    pub censor_fraction: f64,
}

impl Default for SurvivalSpec {
    fn default() -> Self {
        Self { risk: vec![Normal::new(1.0, 0.1), Normal::new(2.8, 0.1)], baseline_hazard: 0.02, censor_fraction: 0.30 }
    }
}

impl SurvivalSpec {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.risk.len() != n_classes {
            return Err(PhantomError::InvalidSpec(format!(
                "{} risk distributions for {n_classes} classes",
                self.risk.len()
            )));
        }
        if !(self.baseline_hazard > 0.0) {
            return Err(PhantomError::InvalidSpec("baseline hazard must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.censor_fraction) {
            return Err(PhantomError::InvalidSpec("censor fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub const NORMAL_ECCENTRICITY: Normal = Normal::new(0.25, 0.05);
pub const ABNORMAL_ECCENTRICITY: Normal = Normal::new(0.7, 0.05);
pub const FULL_DIMS: [usize; 3] = [512, 1024, 1024];
pub const DESK_DIMS: [usize; 3] = [64, 128, 128];

impl PhantomSpec {
    /// Two-class cohort: class 0 is 90/10 normal/abnormal, class 1 is 66/34.
    ///
    /// `scale` multiplies the semi-major distributions (20 and 28 voxels with
    /// sd 10/3 at scale 1); the shell thickness stays `thickness` voxels.
    pub fn two_class(dims: [usize; 3], cells_per_volume: usize, scale: f64, thickness: f64) -> Self {
        let intensity = [60_000.0, 62_000.0];
        let cell = |name: &str, ecc: Normal, major: f64| CellTypeSpec {
            name: name.into(),
            eccentricity: ecc,
            semi_major: Normal::new(major * scale, 10.0 / 3.0 * scale),
            shell_thickness: thickness,
            intensity,
            depth_range: None,
        };
        let class = |name: &str, mixture: [f64; 2]| ClassSpec {
            name: name.into(),
            mixture: mixture.to_vec(),
            cells_per_volume,
            volume_dims: dims,
        };
        Self {
            cell_types: vec![cell("normal", NORMAL_ECCENTRICITY, 20.0), cell("abnormal", ABNORMAL_ECCENTRICITY, 28.0)],
            classes: vec![class("class1", [0.90, 0.10]), class("class2", [0.66, 0.34])],
            voxel_size: [1.0, 1.0, 1.0],
        }
    }

    /// Full-size cohort: 512x1024x1024 volumes with 500 cells each.
    pub fn full_size() -> Self {
        Self::two_class(FULL_DIMS, 500, 1.0, 3.0)
    }

    /// Desk-scale cohort on 64x128x128 volumes.
    pub fn desk() -> Self {
        Self::two_class(DESK_DIMS, DESK_CELLS, DESK_SCALE, DESK_THICKNESS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_types.is_empty() || self.classes.is_empty() {
            return Err(PhantomError::InvalidSpec("need at least one cell type and one class".into()));
        }
        for t in &self.cell_types {
            t.validate()?;
        }
        if !self.voxel_size.iter().all(|s| *s > 0.0) {
            return Err(PhantomError::InvalidSpec("voxel size must be positive".into()));
        }
        for c in &self.classes {
            if c.mixture.len() != self.cell_types.len() {
                return Err(PhantomError::InvalidSpec(format!(
                    "class {:?}: mixture has {} entries for {} cell types",
                    c.name,
                    c.mixture.len(),
                    self.cell_types.len()
                )));
            }
            if c.mixture.iter().any(|f| !(*f >= 0.0)) || (c.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(PhantomError::InvalidSpec(format!(
                    "class {:?}: mixture fractions must be non-negative and sum to 1",
                    c.name
                )));
            }
            for t in &self.cell_types {
                let min_extent = 2.0 * (t.shell_thickness + 1.0) + 1.0;
                if c.volume_dims.iter().any(|&d| (d as f64) < min_extent) {
                    return Err(PhantomError::DimsTooSmall { dims: c.volume_dims, cell_type: t.name.clone() });
                }
            }
        }
        Ok(())
    }
}

/// Desk-scale defaults; see [`PhantomSpec::desk`].
pub const DESK_SCALE: f64 = 0.125;
pub const DESK_THICKNESS: f64 = 1.0;
pub const DESK_CELLS: usize = 500;

/// One rasterizable cell. Positions are `(z, y, x)` in voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spheroid {
    pub center: [f64; 3],
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Unit vector along the axis of symmetry.
    pub axis: [f64; 3],
    pub thickness: f64,
    pub cell_type: usize,
    pub intensity: f64,
}

impl Spheroid {
    pub fn eccentricity(&self) -> f64 {
        (1.0 - (self.semi_minor / self.semi_major).powi(2)).max(0.0).sqrt()
    }

    /// Whether point `p` lies in the hollow shell: inside the outer spheroid
    /// and outside the inner one with both semi-axes reduced by the thickness.
    #[inline]
    pub fn shell_contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let along = d[0] * self.axis[0] + d[1] * self.axis[1] + d[2] * self.axis[2];
        let radial2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along).max(0.0);
        let outer = along * along / (self.semi_major * self.semi_major) + radial2 / (self.semi_minor * self.semi_minor);
        if outer > 1.0 {
            return false;
        }
        let ia = self.semi_major - self.thickness;
        let ib = self.semi_minor - self.thickness;
        if ia <= 0.0 || ib <= 0.0 {
            return true;
        }
        along * along / (ia * ia) + radial2 / (ib * ib) >= 1.0
    }
}

/// Draw one cell of the given type inside a volume of `dims`.
pub fn sample_spheroid(spec: &CellTypeSpec, cell_type: usize, dims: [usize; 3], rng: &mut Rng) -> Spheroid {
    let e = spec.eccentricity.sample(rng).clamp(0.0, 0.99);
    let a = spec.semi_major.sample(rng).max(spec.shell_thickness + 1.0);
    let b = a * (1.0 - e * e).sqrt();
    let axis = loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    };
    let mut center = [0.0; 3];
    for (axis_idx, c) in center.iter_mut().enumerate() {
        let extent = dims[axis_idx] as f64 - 1.0;
        let margin = b.min(extent / 2.0);
        let (mut lo, mut hi) = (margin, extent - margin);
        if axis_idx == 0 {
            if let Some([fa, fb]) = spec.depth_range {
                lo = lo.max(fa * extent);
                hi = hi.min(fb * extent).max(lo);
            }
        }
        *c = lo + (hi - lo) * rng.random::<f64>();
    }
    let [ilo, ihi] = spec.intensity;
    let intensity = (ilo + (ihi - ilo) * rng.random::<f64>()).round();
    Spheroid { center, semi_major: a, semi_minor: b, axis, thickness: spec.shell_thickness, cell_type, intensity }
}

/// Write the shell of `s` into channel 0 of `v`. Voxels outside the volume
/// are skipped. Returns the number of voxels written.
pub fn rasterize_spheroid(s: &Spheroid, v: &mut Volume) -> usize {
    rasterize_into(s, v, None)
}

/// Like [`rasterize_spheroid`], also stamping `1 + cell_type` into `labels`.
pub fn rasterize_spheroid_labeled(s: &Spheroid, v: &mut Volume, labels: &mut Volume) -> usize {
    assert_eq!(v.dims(), labels.dims(), "label volume must match the intensity volume");
    rasterize_into(s, v, Some(labels))
}

fn rasterize_into(s: &Spheroid, v: &mut Volume, mut labels: Option<&mut Volume>) -> usize {
    let dims = v.dims();
    let mut range = [(0usize, 0usize); 3];
    for k in 0..3 {
        let lo = (s.center[k] - s.semi_major).ceil().max(0.0);
        let hi = (s.center[k] + s.semi_major).floor().min(dims[k] as f64 - 1.0);
        if hi < lo {
            return 0;
        }
        range[k] = (lo as usize, hi as usize);
    }
    let label = (s.cell_type + 1).min(u8::MAX as usize) as f64;
    let mut written = 0;
    for z in range[0].0..=range[0].1 {
        for y in range[1].0..=range[1].1 {
            for x in range[2].0..=range[2].1 {
                if s.shell_contains([z as f64, y as f64, x as f64]) {
                    let idx = v.index(0, z, y, x);
                    v.data.set(idx, s.intensity);
                    if let Some(l) = labels.as_deref_mut() {
                        l.data.set(idx, label);
                    }
                    written += 1;
                }
            }
        }
    }
    written
}

/// Exact per-type cell counts by largest-remainder rounding of the mixture.
pub fn mixture_counts(mixture: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = mixture.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>().min(total);
    let mut order: Vec<usize> = (0..mixture.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub sample_id: String,
    pub class: usize,
    pub volume: Volume,
    /// `u8` volume: 0 background, `1 + type` for shell voxels.
    pub labels: Volume,
    pub cells: Vec<Spheroid>,
    pub risk: Option<f64>,
    pub time: Option<f64>,
    pub event: Option<Event>,
}

/// Generate one volume of class `class` from its own random stream.
pub fn generate_sample(spec: &PhantomSpec, class: usize, sample_id: String, rng: &mut Rng) -> Result<PhantomSample> {
    let cs = spec.classes.get(class).ok_or_else(|| PhantomError::InvalidSpec(format!("no class {class}")))?;
    let dims = cs.volume_dims;
    let mut volume = Volume::zeros(DType::U16, 1, dims, spec.voxel_size)?;
    let mut labels = Volume::zeros(DType::U8, 1, dims, spec.voxel_size)?;
    let mut types: Vec<usize> = mixture_counts(&cs.mixture, cs.cells_per_volume)
        .into_iter()
        .enumerate()
        .flat_map(|(t, n)| std::iter::repeat_n(t, n))
        .collect();
    types.shuffle(rng);
    let mut cells = Vec::with_capacity(types.len());
    for t in types {
        let s = sample_spheroid(&spec.cell_types[t], t, dims, rng);
        rasterize_into(&s, &mut volume, Some(&mut labels));
        cells.push(s);
    }
    Ok(PhantomSample { sample_id, class, volume, labels, cells, risk: None, time: None, event: None })
}

fn sample_id(class: usize, i: usize) -> String {
    format!("c{class}_{i:03}")
}

/// `n_per_class` samples per class, class-major order. Sample `i` of the
/// cohort uses random stream `(seed, i)`.
pub fn generate_classification_cohort(spec: &PhantomSpec, n_per_class: usize, seed: u64) -> Result<Vec<PhantomSample>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..spec.classes.len()).flat_map(|c| (0..n_per_class).map(move |i| (c, i))).collect();
    use rayon::prelude::*;
    jobs.par_iter()
        .enumerate()
        .map(|(stream, &(class, i))| {
            let mut rng = rng::stream(seed, stream as u64);
            generate_sample(spec, class, sample_id(class, i), &mut rng)
        })
        .collect()
}

/// Survival cohort: classification cohort plus Cox-exponential times and a
/// global censoring cutoff.
pub fn generate_survival_cohort(
    spec: &PhantomSpec,
    survival: &SurvivalSpec,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<PhantomSample>> {
    survival.validate(spec.classes.len())?;
    let mut samples = generate_classification_cohort(spec, n_per_class, seed)?;
    let risks: Vec<(f64, f64)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::stream(rng::derive_seed(seed, SURVIVAL_STREAM_SALT), i as u64);
            let r = survival.risk[s.class].sample(&mut rng);
            let u = 1.0 - rng.random::<f64>();
            (r, exponential_time(u, survival.baseline_hazard, r))
        })
        .collect();
    let times: Vec<f64> = risks.iter().map(|&(_, t)| t).collect();
    let cutoff = censoring_cutoff(&times, survival.censor_fraction);
    for (s, (r, t)) in samples.iter_mut().zip(risks) {
        s.risk = Some(r);
        if t > cutoff {
            s.time = Some(cutoff);
            s.event = Some(Event::Censored);
        } else {
            s.time = Some(t);
            s.event = Some(Event::Observed);
        }
    }
    Ok(samples)
}

/// Event time of a Cox-exponential model for uniform draw `u` in (0, 1].
pub fn exponential_time(u: f64, baseline_hazard: f64, risk: f64) -> f64 {
    -u.ln() / (baseline_hazard * risk.exp())
}

/// Cutoff at an order statistic of `times` so that the number of times
/// strictly above it is `round(target * n)`.
pub fn censoring_cutoff(times: &[f64], target: f64) -> f64 {
    if times.is_empty() {
        return f64::INFINITY;
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let censored = ((target * n as f64).round() as usize).min(n - 1);
    if censored == 0 {
        return f64::INFINITY;
    }
    sorted[n - censored - 1]
}

/// Shell-voxel counts per plane and cell type from a label volume.
pub fn plane_type_counts(labels: &Volume, n_types: usize) -> Vec<Vec<usize>> {
    let plane = labels.plane_len();
    (0..labels.depth)
        .map(|z| {
            let mut counts = vec![0; n_types];
            for i in z * plane..(z + 1) * plane {
                let l = labels.data.get(i) as usize;
                if l >= 1 && l <= n_types {
                    counts[l - 1] += 1;
                }
            }
            counts
        })
        .collect()
}

/// Plane that best contains every cell type: maximises the smallest per-type
/// shell-voxel count, then the total, then prefers the lowest index.
pub fn targeted_plane(counts: &[Vec<usize>]) -> Option<usize> {
    counts
        .iter()
        .enumerate()
        .map(|(z, c)| (z, c.iter().copied().min().unwrap_or(0), c.iter().sum::<usize>()))
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)).then(b.0.cmp(&a.0)))
        .map(|(z, _, _)| z)
}

/// Write volumes, label volumes and `manifest.tsv` under `dir`.
pub fn write_cohort(samples: &[PhantomSample], dir: &Path) -> Result<CohortManifest> {
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("volumes/{}.vmil", s.sample_id);
        store::write_volume(&s.volume, dir.join(&rel))?;
        store::write_volume(&s.labels, dir.join(format!("labels/{}.vmil", s.sample_id)))?;
        records.push(ManifestRecord {
            sample_id: s.sample_id.clone(),
            volume_path: rel,
            label: Some(s.class.min(1) as u8),
            time: s.time,
            event: s.event,
        });
    }
    let manifest = CohortManifest::new(records)?;
    store::write_manifest(&manifest, dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Voxel histogram as sorted `(value, count)` pairs.
pub fn histogram(v: &Volume) -> Vec<(u32, usize)> {
    let mut map = std::collections::BTreeMap::new();
    if let VoxelData::U16(d) = &v.data {
        for &x in d {
            *map.entry(x as u32).or_insert(0usize) += 1;
        }
    } else {
        for i in 0..v.data.len() {
            *map.entry(v.data.get(i) as u32).or_insert(0usize) += 1;
        }
    }
    map.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(center: [f64; 3], r: f64, t: f64) -> Spheroid {
        Spheroid { center, semi_major: r, semi_minor: r, axis: [1.0, 0.0, 0.0], thickness: t, cell_type: 0, intensity: 1000.0 }
    }

    #[test]
    fn minor_axis_from_eccentricity() {
        let spec = |e: f64| CellTypeSpec {
            name: "t".into(),
            eccentricity: Normal::new(e, 0.0),
            semi_major: Normal::new(28.0, 0.0),
            shell_thickness: 3.0,
            intensity: [100.0, 100.0],
            depth_range: None,
        };
        let mut rng = rng::stream(1, 0);
        let s = sample_spheroid(&spec(0.0), 0, [128; 3], &mut rng);
        assert_eq!(s.semi_minor, s.semi_major);
        let s = sample_spheroid(&spec(0.7), 0, [128; 3], &mut rng);
        assert!((s.semi_minor - 28.0 * 0.51f64.sqrt()).abs() < 1e-12);
        assert!((s.semi_minor - 19.99).abs() < 0.01);
        assert!((s.eccentricity() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn eccentricity_moments_over_many_draws() {
        let spec = &PhantomSpec::full_size().cell_types[0];
        let mut rng = rng::stream(3, 0);
        let n = 100_000;
        let draws: Vec<Spheroid> = (0..n).map(|_| sample_spheroid(spec, 0, FULL_DIMS, &mut rng)).collect();
        let mean_e = draws.iter().map(|s| s.eccentricity()).sum::<f64>() / n as f64;
        assert!((mean_e - 0.25).abs() < 0.01, "mean eccentricity {mean_e}");
        // 3 standard errors of the mean: sd / sqrt(n) * 3
        assert!((mean_e - 0.25).abs() < 3.0 * 0.05 / (n as f64).sqrt(), "{mean_e}");
        let mean_a = draws.iter().map(|s| s.semi_major).sum::<f64>() / n as f64;
        assert!((mean_a - 20.0).abs() < 3.0 * (10.0 / 3.0) / (n as f64).sqrt(), "{mean_a}");
        let mean_axis_z = draws.iter().map(|s| s.axis[0]).sum::<f64>() / n as f64;
        assert!(mean_axis_z.abs() < 0.01);
    }

    #[test]
    fn sphere_shell_matches_brute_force() {
        let mut v = Volume::zeros(DType::U16, 1, [64; 3], [1.0; 3]).unwrap();
        let s = sphere([32.0, 32.0, 32.0], 10.0, 3.0);
        let written = rasterize_spheroid(&s, &mut v);
        let mut expected = 0;
        for z in 0..64i64 {
            for y in 0..64i64 {
                for x in 0..64i64 {
                    let d2 = (z - 32).pow(2) + (y - 32).pow(2) + (x - 32).pow(2);
                    let inside = (49..=100).contains(&d2);
                    expected += inside as usize;
                    let got = v.get(0, z as usize, y as usize, x as usize) > 0.0;
                    assert_eq!(got, inside, "voxel ({z},{y},{x})");
                }
            }
        }
        assert_eq!(written, expected);
    }

    #[test]
    fn corner_cell_is_clipped() {
        let mut v = Volume::zeros(DType::U16, 1, [16; 3], [1.0; 3]).unwrap();
        let s = sphere([0.0, 0.0, 0.0], 6.0, 2.0);
        let written = rasterize_spheroid(&s, &mut v);
        let nonzero = (0..v.data.len()).filter(|&i| v.data.get(i) > 0.0).count();
        assert_eq!(written, nonzero);
        assert!(written > 0);
        let far = sphere([-40.0, 0.0, 0.0], 6.0, 2.0);
        assert_eq!(rasterize_spheroid(&far, &mut v), 0);
    }

    #[test]
    fn default_thickness_is_three() {
        assert!(PhantomSpec::full_size().cell_types.iter().all(|t| t.shell_thickness == 3.0));
        let p = PhantomSpec::full_size();
        assert_eq!(p.classes[0].mixture, vec![0.90, 0.10]);
        assert_eq!(p.classes[1].mixture, vec![0.66, 0.34]);
        assert_eq!(p.classes[0].cells_per_volume, 500);
        assert_eq!(p.classes[0].volume_dims, [512, 1024, 1024]);
        assert_eq!(mixture_counts(&[0.9, 0.1], 500), vec![450, 50]);
        assert_eq!(mixture_counts(&[0.66, 0.34], 500), vec![330, 170]);
        assert_eq!(mixture_counts(&[0.5, 0.5], 3).iter().sum::<usize>(), 3);
    }

    #[test]
    fn mixture_must_sum_to_one() {
        let mut p = PhantomSpec::desk();
        p.classes[0].mixture = vec![0.9, 0.2];
        assert!(matches!(p.validate(), Err(PhantomError::InvalidSpec(_))));
    }

    #[test]
    fn tiny_dims_rejected() {
        let p = PhantomSpec::two_class([4, 64, 64], 10, 1.0, 3.0);
        assert!(matches!(generate_classification_cohort(&p, 1, 0), Err(PhantomError::DimsTooSmall { .. })));
    }

    fn small_spec() -> PhantomSpec {
        PhantomSpec::two_class([24, 32, 32], 12, 0.2, 1.0)
    }

    #[test]
    fn deterministic_and_histogram_is_clean() {
        let spec = small_spec();
        let a = generate_classification_cohort(&spec, 2, 11).unwrap();
        let b = generate_classification_cohort(&spec, 2, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(store::encode_volume(&x.volume).unwrap(), store::encode_volume(&y.volume).unwrap());
            assert_eq!(x.cells.len(), 12);
        }
        for s in &a {
            for (value, _) in histogram(&s.volume) {
                assert!(value == 0 || (60_000..=62_000).contains(&value), "{value}");
            }
        }
        let c = generate_classification_cohort(&spec, 2, 12).unwrap();
        assert_ne!(a[0].volume, c[0].volume);
    }

    #[test]
    fn survival_cutoff_and_ordering() {
        let u = 0.3;
        assert!(exponential_time(u, 0.02, 2.8) < exponential_time(u, 0.02, 1.0));
        let times: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let cutoff = censoring_cutoff(&times, 0.3);
        assert_eq!(times.iter().filter(|&&t| t > cutoff).count(), 30);
        assert_eq!(censoring_cutoff(&times, 0.0), f64::INFINITY);
    }

    #[test]
    fn survival_cohort_censoring_fraction() {
        let spec = small_spec();
        let s = generate_survival_cohort(&spec, &SurvivalSpec::default(), 10, 5).unwrap();
        let n = s.len() as f64;
        let censored = s.iter().filter(|x| x.event == Some(Event::Censored)).count() as f64;
        assert!((censored / n - 0.30).abs() <= 2.0 / n);
        let cutoff = s.iter().filter(|x| x.event == Some(Event::Censored)).map(|x| x.time.unwrap()).next().unwrap();
        assert!(s.iter().all(|x| x.time.unwrap() <= cutoff));
    }

    #[test]
    fn targeted_plane_prefers_joint_presence() {
        let counts = vec![vec![100, 0], vec![10, 3], vec![5, 5], vec![6, 5]];
        assert_eq!(targeted_plane(&counts), Some(3));
        assert_eq!(targeted_plane(&[vec![1, 1], vec![1, 1]]), Some(0));
    }

    #[test]
    fn depth_range_confines_centres() {
        let mut spec = small_spec();
        spec.cell_types[1].depth_range = Some([0.5, 1.0]);
        spec.classes[0].mixture = vec![0.0, 1.0];
        let s = generate_classification_cohort(&spec, 1, 3).unwrap();
        assert!(s[0].cells.iter().all(|c| c.center[0] >= 0.5 * 23.0 - 1e-9));
    }
}
