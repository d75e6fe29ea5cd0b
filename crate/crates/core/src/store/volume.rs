use std::path::Path;

use super::cursor::Cursor;
use super::{read_file, write_file, Result, StoreError};

const MAGIC: [u8; 4] = *b"VMIL";
const VERSION: u16 = 1;

/// Size of the fixed `.vmil` header in bytes.
pub const VOLUME_HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    U16,
    F32,
}

impl DType {
    pub fn code(self) -> u16 {
        match self {
            DType::U8 => 0,
            DType::U16 => 1,
            DType::F32 => 2,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(DType::U8),
            1 => Some(DType::U16),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 => 4,
        }
    }

    /// Largest representable intensity; `f32` volumes are treated as `[0, 1]`.
    pub fn max_value(self) -> f64 {
        match self {
            DType::U8 => u8::MAX as f64,
            DType::U16 => u16::MAX as f64,
            DType::F32 => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum VoxelData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::U8 => VoxelData::U8(vec![0; len]),
            DType::U16 => VoxelData::U16(vec![0; len]),
            DType::F32 => VoxelData::F32(vec![0.0; len]),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            VoxelData::U8(_) => DType::U8,
            VoxelData::U16(_) => DType::U16,
            VoxelData::F32(_) => DType::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::U16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        match self {
            VoxelData::U8(v) => v[idx] as f64,
            VoxelData::U16(v) => v[idx] as f64,
            VoxelData::F32(v) => v[idx] as f64,
        }
    }

    /// Store `value`, rounding and saturating for integer types.
    #[inline]
    pub fn set(&mut self, idx: usize, value: f64) {
        match self {
            VoxelData::U8(v) => v[idx] = value.round().clamp(0.0, u8::MAX as f64) as u8,
            VoxelData::U16(v) => v[idx] = value.round().clamp(0.0, u16::MAX as f64) as u16,
            VoxelData::F32(v) => v[idx] = value as f32,
        }
    }
}

impl PartialEq for VoxelData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (VoxelData::U8(a), VoxelData::U8(b)) => a == b,
            (VoxelData::U16(a), VoxelData::U16(b)) => a == b,
            (VoxelData::F32(a), VoxelData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Channel-major, then depth-major voxel grid with physical spacing.
///
/// Voxel `(c, z, y, x)` lives at `((c * D + z) * H + y) * W + x`.
#[derive(Debug, Clone)]
pub struct Volume {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Micrometres per voxel along (depth, height, width).
    pub voxel_size: [f32; 3],
    pub data: VoxelData,
}

impl PartialEq for Volume {
    fn eq(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && self.channels == other.channels
            && self
                .voxel_size
                .iter()
                .zip(other.voxel_size.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.data == other.data
    }
}

impl Volume {
    pub fn new(
        channels: usize,
        dims: [usize; 3],
        voxel_size: [f32; 3],
        data: VoxelData,
    ) -> Result<Self> {
        let vol = Self { channels, depth: dims[0], height: dims[1], width: dims[2], voxel_size, data };
        vol.validate()?;
        Ok(vol)
    }

    pub fn zeros(dtype: DType, channels: usize, dims: [usize; 3], voxel_size: [f32; 3]) -> Result<Self> {
        let len = channels * dims[0] * dims[1] * dims[2];
        Self::new(channels, dims, voxel_size, VoxelData::zeros(dtype, len))
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.channels * self.depth * self.height * self.width;
        if self.data.len() != expected {
            return Err(StoreError::Invalid(format!(
                "voxel count {} does not match {}x{}x{}x{}",
                self.data.len(),
                self.channels,
                self.depth,
                self.height,
                self.width
            )));
        }
        if !self.voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(StoreError::Invalid(format!("voxel size must be positive, got {:?}", self.voxel_size)));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel_len(&self) -> usize {
        self.depth * self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.depth + z) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        self.data.get(self.index(c, z, y, x))
    }

    /// Mean over channels at one spatial position.
    #[inline]
    pub fn mean_intensity(&self, z: usize, y: usize, x: usize) -> f64 {
        let spatial = (z * self.height + y) * self.width + x;
        let stride = self.channel_len();
        let mut acc = 0.0;
        for c in 0..self.channels {
            acc += self.data.get(c * stride + spatial);
        }
        acc / self.channels as f64
    }

    /// Number of payload bytes for a volume of this shape and type.
    pub fn payload_len(dtype: DType, channels: usize, dims: [usize; 3]) -> usize {
        channels * dims[0] * dims[1] * dims[2] * dtype.size_bytes()
    }

    /// Total `.vmil` file size for a volume of this shape and type.
    pub fn encoded_len(dtype: DType, channels: usize, dims: [usize; 3]) -> usize {
        VOLUME_HEADER_LEN + Self::payload_len(dtype, channels, dims)
    }
}

fn dim_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| StoreError::Invalid(format!("{what} {value} exceeds u32")))
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let mut out = Vec::with_capacity(Volume::encoded_len(v.dtype(), v.channels, v.dims()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&v.dtype().code().to_le_bytes());
    for (value, what) in [
        (v.channels, "channels"),
        (v.depth, "depth"),
        (v.height, "height"),
        (v.width, "width"),
    ] {
        out.extend_from_slice(&dim_u32(value, what)?.to_le_bytes());
    }
    for s in v.voxel_size {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.resize(VOLUME_HEADER_LEN, 0);
    match &v.data {
        VoxelData::U8(d) => out.extend_from_slice(d),
        VoxelData::U16(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        VoxelData::F32(d) => d.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < VOLUME_HEADER_LEN {
        // A short file with the wrong magic is still a bad-magic error.
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(StoreError::BadMagic { expected: MAGIC, found: bytes[..4].try_into().unwrap() });
        }
        return Err(StoreError::Truncated { expected: VOLUME_HEADER_LEN, actual: bytes.len() });
    }
    let mut cur = Cursor::new(bytes);
    cur.magic(MAGIC)?;
    cur.version(VERSION)?;
    let code = cur.u16()?;
    let dtype = DType::from_code(code).ok_or_else(|| StoreError::InvalidHeader(format!("unknown dtype code {code}")))?;
    let channels = cur.u32()? as usize;
    let dims = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let voxel_size = [cur.f32()?, cur.f32()?, cur.f32()?];
    let reserved = cur.take(VOLUME_HEADER_LEN - cur.position())?;
    if reserved.iter().any(|&b| b != 0) {
        return Err(StoreError::InvalidHeader("reserved header bytes are not zero".into()));
    }
    if !voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(StoreError::InvalidHeader(format!("non-positive voxel size {voxel_size:?}")));
    }
    let count = channels
        .checked_mul(dims[0])
        .and_then(|n| n.checked_mul(dims[1]))
        .and_then(|n| n.checked_mul(dims[2]))
        .ok_or_else(|| StoreError::InvalidHeader("voxel count overflows".into()))?;
    let payload = count
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| StoreError::InvalidHeader("payload size overflows".into()))?;
    cur.expect_remaining(payload)?;
    let raw = cur.take(payload)?;
    let data = match dtype {
        DType::U8 => VoxelData::U8(raw.to_vec()),
        DType::U16 => VoxelData::U16(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
        DType::F32 => {
            VoxelData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
    };
    Volume::new(channels, dims, voxel_size, data)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_volume(v)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Volume {
        let data: Vec<u16> = (0..2 * 3 * 4 * 5).map(|i| (i * 37) as u16).collect();
        Volume::new(2, [3, 4, 5], [1.0, 0.5, 0.25], VoxelData::U16(data)).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_volume(&small()).unwrap();
        assert_eq!(&bytes[..4], b"VMIL");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), 0.5);
        assert!(bytes[36..64].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), 64 + 2 * 3 * 4 * 5 * 2);
    }

    #[test]
    fn otls_sized_payload() {
        let dims = [320, 520, 9500];
        assert_eq!(Volume::payload_len(DType::U16, 2, dims), 2 * 320 * 520 * 9500 * 2);
        assert_eq!(Volume::encoded_len(DType::U16, 2, dims), 2 * 320 * 520 * 9500 * 2 + 64);
    }

    #[test]
    fn distinct_errors() {
        let good = encode_volume(&small()).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bad), Err(StoreError::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_volume(&bad), Err(StoreError::VersionMismatch { found: 9, .. })));

        let bad = &good[..good.len() - 1];
        assert!(matches!(decode_volume(bad), Err(StoreError::Truncated { .. })));

        let bad = &good[..10];
        assert!(matches!(decode_volume(bad), Err(StoreError::Truncated { .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_volume(&bad), Err(StoreError::TrailingBytes { extra: 1 })));

        let mut bad = good;
        bad[6] = 7;
        assert!(matches!(decode_volume(&bad), Err(StoreError::InvalidHeader(_))));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new(1, [2, 2, 2], [1.0; 3], VoxelData::U8(vec![0; 7])).is_err());
        assert!(Volume::new(1, [1, 1, 1], [0.0, 1.0, 1.0], VoxelData::U8(vec![0])).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/v.vmil");
        let v = small();
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }
}
