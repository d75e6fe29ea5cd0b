use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{MaskStack, PreprocessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    Planes2d,
    Cuboids3d,
}

impl PatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchMode::Planes2d => "planes2d",
            PatchMode::Cuboids3d => "cuboids3d",
        }
    }
}

impl FromStr for PatchMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "planes2d" => Ok(PatchMode::Planes2d),
            "cuboids3d" => Ok(PatchMode::Cuboids3d),
            other => Err(format!("unknown patch mode {other:?}")),
        }
    }
}

/// Patch origins `(d, h, w)` laid over one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub mode: PatchMode,
    pub patch_shape: [usize; 3],
    pub overlaps: [usize; 3],
    pub reference_plane: Option<usize>,
    pub volume_dims: [usize; 3],
    pub entries: Vec<[usize; 3]>,
}

/// Per-plane summed-area tables for O(depth) box counts.
struct TissueCounter {
    dims: [usize; 3],
    tables: Vec<Vec<u32>>,
}

impl TissueCounter {
    fn new(mask: &MaskStack) -> Self {
        let [d, h, w] = mask.dims();
        let tables = (0..d)
            .map(|z| {
                let plane = mask.plane(z);
                let mut t = vec![0u32; (h + 1) * (w + 1)];
                for y in 0..h {
                    let mut row = 0u32;
                    for x in 0..w {
                        row += plane[y * w + x] as u32;
                        t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
                    }
                }
                t
            })
            .collect();
        Self { dims: mask.dims(), tables }
    }

    fn count_plane(&self, z: usize, y: usize, x: usize, h: usize, w: usize) -> u64 {
        let t = &self.tables[z];
        let stride = self.dims[2] + 1;
        let at = |yy: usize, xx: usize| t[yy * stride + xx] as i64;
        (at(y + h, x + w) - at(y, x + w) - at(y + h, x) + at(y, x)) as u64
    }

    fn count(&self, origin: [usize; 3], shape: [usize; 3]) -> u64 {
        (origin[0]..origin[0] + shape[0]).map(|z| self.count_plane(z, origin[1], origin[2], shape[1], shape[2])).sum()
    }
}

/// Tile origins along one axis covering `[lo, hi]`, clamped so the last tile
/// stays inside `[0, extent)`.
fn axis_origins(lo: usize, hi: usize, size: usize, overlap: usize, extent: usize) -> Vec<usize> {
    let step = size.saturating_sub(overlap).max(1);
    let max_origin = extent - size;
    let mut out = Vec::new();
    let mut o = lo;
    loop {
        let clamped = o.min(max_origin);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if o + size > hi {
            break;
        }
        o += step;
    }
    out
}

fn bounding_box(mask: &MaskStack, z: usize) -> Option<[usize; 4]> {
    let [_, h, w] = mask.dims();
    let plane = mask.plane(z);
    let mut bb: Option<[usize; 4]> = None;
    for y in 0..h {
        for x in 0..w {
            if plane[y * w + x] {
                bb = Some(match bb {
                    None => [y, y, x, x],
                    Some([y0, y1, x0, x1]) => [y0.min(y), y1.max(y), x0.min(x), x1.max(x)],
                });
            }
        }
    }
    bb
}

/// Lay a patch grid over the kept tissue of `mask`.
///
/// In 2D mode every kept plane is tiled over its tissue bounding box and
/// tiles without tissue are dropped. In 3D mode in-plane origins are taken
/// from the reference plane and replicated along depth at multiples of
/// `d - overlaps[0]` on both sides; cuboids with at most half tissue are
/// dropped.
pub fn build_patch_grid(
    mask: &MaskStack,
    mode: PatchMode,
    patch_shape: [usize; 3],
    overlaps: [usize; 3],
) -> Result<PatchGrid> {
    let dims = mask.dims();
    if patch_shape.iter().any(|&s| s == 0) {
        return Err(PreprocessError::InvalidParams(format!("patch shape {patch_shape:?} has a zero axis")));
    }
    if mode == PatchMode::Planes2d && patch_shape[0] != 1 {
        return Err(PreprocessError::InvalidParams("2D patches must have depth 1".into()));
    }
    if patch_shape.iter().zip(&dims).any(|(s, d)| s > d) {
        return Err(PreprocessError::PatchTooLarge { shape: patch_shape, dims });
    }
    if overlaps.iter().zip(&patch_shape).any(|(o, s)| o >= s) {
        return Err(PreprocessError::InvalidParams(format!(
            "overlaps {overlaps:?} must be smaller than patch shape {patch_shape:?}"
        )));
    }
    let counter = TissueCounter::new(mask);
    let [pd, ph, pw] = patch_shape;
    let mut entries = Vec::new();
    let reference_plane = match mode {
        PatchMode::Planes2d => {
            for &z in mask.kept_planes() {
                let Some([y0, y1, x0, x1]) = bounding_box(mask, z) else { continue };
                for y in axis_origins(y0, y1, ph, overlaps[1], dims[1]) {
                    for x in axis_origins(x0, x1, pw, overlaps[2], dims[2]) {
                        if counter.count_plane(z, y, x, ph, pw) > 0 {
                            entries.push([z, y, x]);
                        }
                    }
                }
            }
            None
        }
        PatchMode::Cuboids3d => {
            let r = mask.reference_plane().ok_or(PreprocessError::NoTissue)?;
            let [y0, y1, x0, x1] = bounding_box(mask, r).ok_or(PreprocessError::NoTissue)?;
            let mut inplane = Vec::new();
            for y in axis_origins(y0, y1, ph, overlaps[1], dims[1]) {
                for x in axis_origins(x0, x1, pw, overlaps[2], dims[2]) {
                    if counter.count_plane(r, y, x, ph, pw) > 0 {
                        inplane.push((y, x));
                    }
                }
            }
            let step = pd - overlaps[0];
            let mut depths: Vec<usize> = (1..).map(|k| k * step).take_while(|&o| o <= r).map(|o| r - o).collect();
            depths.reverse();
            depths.extend((0..).map(|k| r + k * step).take_while(|&z| z < dims[0]));
            depths.retain(|&z| z + pd <= dims[0]);
            let volume = (pd * ph * pw) as u64;
            for &z in &depths {
                for &(y, x) in &inplane {
                    if 2 * counter.count([z, y, x], patch_shape) > volume {
                        entries.push([z, y, x]);
                    }
                }
            }
            Some(r)
        }
    };
    Ok(PatchGrid { mode, patch_shape, overlaps, reference_plane, volume_dims: dims, entries })
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tissue fraction of each entry, recomputed from `mask`.
    pub fn tissue_fractions(&self, mask: &MaskStack) -> Vec<f64> {
        let counter = TissueCounter::new(mask);
        let volume = self.patch_shape.iter().product::<usize>() as f64;
        self.entries.iter().map(|&o| counter.count(o, self.patch_shape) as f64 / volume).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let triple = |v: [usize; 3]| format!("{}\t{}\t{}", v[0], v[1], v[2]);
        writeln!(s, "mode\t{}", self.mode.as_str()).unwrap();
        writeln!(s, "patch_shape\t{}", triple(self.patch_shape)).unwrap();
        writeln!(s, "overlaps\t{}", triple(self.overlaps)).unwrap();
        writeln!(s, "volume_dims\t{}", triple(self.volume_dims)).unwrap();
        match self.reference_plane {
            Some(r) => writeln!(s, "reference_plane\t{r}").unwrap(),
            None => writeln!(s, "reference_plane\t-").unwrap(),
        }
        writeln!(s, "origin_d\torigin_h\torigin_w").unwrap();
        for &e in &self.entries {
            writeln!(s, "{}", triple(e)).unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, message: String| PreprocessError::GridFormat { line, message };
        let mut field = |key: &str| -> Result<(usize, Vec<String>)> {
            let (n, l) = lines.next().ok_or_else(|| err(0, format!("missing {key} line")))?;
            let mut parts = l.split('\t');
            if parts.next() != Some(key) {
                return Err(err(n, format!("expected {key}")));
            }
            Ok((n, parts.map(str::to_string).collect()))
        };
        let parse_triple = |n: usize, v: &[String]| -> Result<[usize; 3]> {
            if v.len() != 3 {
                return Err(err(n, format!("expected 3 values, got {}", v.len())));
            }
            let mut out = [0; 3];
            for (o, s) in out.iter_mut().zip(v) {
                *o = s.parse().map_err(|_| err(n, format!("bad integer {s:?}")))?;
            }
            Ok(out)
        };
        let (n, v) = field("mode")?;
        let mode: PatchMode = v.first().ok_or_else(|| err(n, "missing mode".into()))?.parse().map_err(|m| err(n, m))?;
        let (n, v) = field("patch_shape")?;
        let patch_shape = parse_triple(n, &v)?;
        let (n, v) = field("overlaps")?;
        let overlaps = parse_triple(n, &v)?;
        let (n, v) = field("volume_dims")?;
        let volume_dims = parse_triple(n, &v)?;
        let (n, v) = field("reference_plane")?;
        let reference_plane = match v.first().map(String::as_str) {
            Some("-") => None,
            Some(s) => Some(s.parse().map_err(|_| err(n, format!("bad reference plane {s:?}")))?),
            None => return Err(err(n, "missing reference plane".into())),
        };
        let (n, header) = lines.next().ok_or_else(|| err(0, "missing origin header".into()))?;
        if header != "origin_d\torigin_h\torigin_w" {
            return Err(err(n, "bad origin header".into()));
        }
        let mut entries = Vec::new();
        for (n, l) in lines {
            if l.is_empty() {
                continue;
            }
            let v: Vec<String> = l.split('\t').map(str::to_string).collect();
            let e = parse_triple(n, &v)?;
            if e.iter().zip(&patch_shape).zip(&volume_dims).any(|((o, s), d)| o + s > *d) {
                return Err(PreprocessError::OutOfBounds { origin: e, shape: patch_shape, dims: volume_dims });
            }
            entries.push(e);
        }
        Ok(Self { mode, patch_shape, overlaps, reference_plane, volume_dims, entries })
    }
}
