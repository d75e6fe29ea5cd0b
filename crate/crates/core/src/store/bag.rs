use std::path::Path;

use ndarray::Array2;

use super::cursor::Cursor;
use super::{read_file, write_file, Result, StoreError};

const MAGIC: [u8; 4] = *b"FBAG";
const VERSION: u16 = 1;
/// Coordinate schema 1: origin (d, h, w) followed by shape (d, h, w), all `u32`.
const COORD_SCHEMA: u16 = 1;
const HEADER_LEN: usize = 32;

/// Location of one patch inside its source volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchCoord {
    pub origin: [u32; 3],
    pub shape: [u32; 3],
}

impl PatchCoord {
    pub fn new(origin: [usize; 3], shape: [usize; 3]) -> Self {
        Self { origin: origin.map(|v| v as u32), shape: shape.map(|v| v as u32) }
    }

    pub fn origin_usize(&self) -> [usize; 3] {
        self.origin.map(|v| v as usize)
    }

    pub fn shape_usize(&self) -> [usize; 3] {
        self.shape.map(|v| v as usize)
    }
}

/// Instance features of one sample: `J` rows of `K` finite 32-bit values.
#[derive(Debug, Clone)]
pub struct FeatureBag {
    sample_id: String,
    dim: usize,
    features: Vec<f32>,
    coords: Vec<PatchCoord>,
}

impl PartialEq for FeatureBag {
    fn eq(&self, other: &Self) -> bool {
        self.sample_id == other.sample_id
            && self.dim == other.dim
            && self.coords == other.coords
            && self.features.len() == other.features.len()
            && self.features.iter().zip(&other.features).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl FeatureBag {
    pub fn new(sample_id: impl Into<String>, dim: usize, features: Vec<f32>, coords: Vec<PatchCoord>) -> Result<Self> {
        if dim == 0 {
            return Err(StoreError::Invalid("feature dimension must be at least 1".into()));
        }
        if features.len() != dim * coords.len() {
            return Err(StoreError::Invalid(format!(
                "{} feature values do not form {} rows of {dim}",
                features.len(),
                coords.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { row: pos / dim, col: pos % dim });
        }
        Ok(Self { sample_id: sample_id.into(), dim, features, coords })
    }

    pub fn from_rows(sample_id: impl Into<String>, rows: &[Vec<f64>], coords: Vec<PatchCoord>) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(StoreError::Invalid("ragged feature rows".into()));
        }
        let features = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        Self::new(sample_id, dim, features, coords)
    }

    /// Concatenate several bags of one patient into a single bag.
    pub fn pool(sample_id: impl Into<String>, bags: &[FeatureBag]) -> Result<Self> {
        let dim = bags.first().map(|b| b.dim).ok_or_else(|| StoreError::Invalid("no bags to pool".into()))?;
        if bags.iter().any(|b| b.dim != dim) {
            return Err(StoreError::Invalid("cannot pool bags with different feature dimensions".into()));
        }
        let features = bags.iter().flat_map(|b| b.features.iter().copied()).collect();
        let coords = bags.iter().flat_map(|b| b.coords.iter().copied()).collect();
        Self::new(sample_id, dim, features, coords)
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.features[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coords(&self) -> &[PatchCoord] {
        &self.coords
    }

    /// Upcast to a `J x K` matrix of 64-bit reals.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.len(), self.dim), self.features.iter().map(|&v| v as f64).collect())
            .expect("shape checked at construction")
    }

    /// Sub-bag made of the given instance indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut coords = Vec::with_capacity(indices.len());
        for &j in indices {
            if j >= self.len() {
                return Err(StoreError::Invalid(format!("instance {j} out of range for bag of {}", self.len())));
            }
            features.extend_from_slice(self.row(j));
            coords.push(self.coords[j]);
        }
        Self::new(self.sample_id.clone(), self.dim, features, coords)
    }
}

pub fn encode_feature_bag(bag: &FeatureBag) -> Result<Vec<u8>> {
    let id = bag.sample_id.as_bytes();
    let j = u32::try_from(bag.len()).map_err(|_| StoreError::Invalid("too many instances".into()))?;
    let k = u32::try_from(bag.dim).map_err(|_| StoreError::Invalid("feature dimension too large".into()))?;
    let id_len = u32::try_from(id.len()).map_err(|_| StoreError::Invalid("sample id too long".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + id.len() + bag.features.len() * 4 + bag.len() * 24);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&COORD_SCHEMA.to_le_bytes());
    out.extend_from_slice(&j.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.resize(HEADER_LEN, 0);
    out.extend_from_slice(id);
    for v in &bag.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &bag.coords {
        for v in c.origin.iter().chain(c.shape.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_feature_bag(bytes: &[u8]) -> Result<FeatureBag> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MAGIC)?;
    cur.version(VERSION)?;
    let schema = cur.u16()?;
    if schema != COORD_SCHEMA {
        return Err(StoreError::InvalidHeader(format!("unknown coordinate schema {schema}")));
    }
    let j = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let id_len = cur.u32()? as usize;
    let reserved = cur.take(HEADER_LEN - cur.position())?;
    if reserved.iter().any(|&b| b != 0) {
        return Err(StoreError::InvalidHeader("reserved header bytes are not zero".into()));
    }
    if k == 0 {
        return Err(StoreError::InvalidHeader("feature dimension 0".into()));
    }
    let body = j
        .checked_mul(k)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(j.checked_mul(24)?))
        .and_then(|n| n.checked_add(id_len))
        .ok_or_else(|| StoreError::InvalidHeader("payload size overflows".into()))?;
    cur.expect_remaining(body)?;
    let id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| StoreError::InvalidHeader("sample id is not UTF-8".into()))?
        .to_string();
    let mut features = Vec::with_capacity(j * k);
    for _ in 0..j * k {
        features.push(cur.f32()?);
    }
    let mut coords = Vec::with_capacity(j);
    for _ in 0..j {
        let origin = [cur.u32()?, cur.u32()?, cur.u32()?];
        let shape = [cur.u32()?, cur.u32()?, cur.u32()?];
        coords.push(PatchCoord { origin, shape });
    }
    cur.finish()?;
    FeatureBag::new(id, k, features, coords)
}

pub fn write_feature_bag(bag: &FeatureBag, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_feature_bag(bag)?)
}

pub fn read_feature_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    decode_feature_bag(&read_file(path.as_ref())?)
}
