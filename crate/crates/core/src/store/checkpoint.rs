use std::collections::HashSet;
use std::path::Path;

use super::cursor::Cursor;
use super::{read_file, write_file, Result, StoreError};

const MAGIC: [u8; 4] = *b"VCKP";
const VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl PartialEq for NamedTensor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(StoreError::Invalid(format!(
                "tensor {name:?}: shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

/// Model parameters plus optimizer state.
///
/// `first_moment` and `second_moment` are either empty (no optimizer state)
/// or hold one tensor per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    pub first_moment: Vec<NamedTensor>,
    pub second_moment: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&NamedTensor> {
        self.params.iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.params {
            if !seen.insert(t.name.as_str()) {
                return Err(StoreError::DuplicateTensor(t.name.clone()));
            }
        }
        for moments in [&self.first_moment, &self.second_moment] {
            if moments.is_empty() {
                continue;
            }
            if moments.len() != self.params.len()
                || moments.iter().zip(&self.params).any(|(m, p)| m.name != p.name || m.shape != p.shape)
            {
                return Err(StoreError::Invalid("optimizer state does not mirror the parameters".into()));
            }
        }
        Ok(())
    }
}

fn encode_section(out: &mut Vec<u8>, tensors: &[NamedTensor]) -> Result<()> {
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| StoreError::Invalid("tensor name too long".into()))?;
        let ndim = u8::try_from(t.shape.len()).map_err(|_| StoreError::Invalid("too many tensor dims".into()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(ndim);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| StoreError::Invalid("tensor dim too large".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn decode_section(cur: &mut Cursor<'_>, count: usize) -> Result<Vec<NamedTensor>> {
    let mut out = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| StoreError::InvalidHeader("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| StoreError::InvalidHeader("tensor size overflows".into()))?;
        let raw = cur.take(count.checked_mul(8).ok_or_else(|| StoreError::InvalidHeader("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedTensor::new(name, shape, data)?);
    }
    Ok(out)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    out.extend_from_slice(&ckpt.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    for section in [&ckpt.params, &ckpt.first_moment, &ckpt.second_moment] {
        let n = u32::try_from(section.len()).map_err(|_| StoreError::Invalid("too many tensors".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    encode_section(&mut out, &ckpt.params)?;
    encode_section(&mut out, &ckpt.first_moment)?;
    encode_section(&mut out, &ckpt.second_moment)?;
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(bytes);
    cur.magic(MAGIC)?;
    cur.version(VERSION)?;
    if cur.u16()? != 0 {
        return Err(StoreError::InvalidHeader("reserved header bytes are not zero".into()));
    }
    let config_hash = cur.u64()?;
    let seed = cur.u64()?;
    let step = cur.u64()?;
    let counts = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let params = decode_section(&mut cur, counts[0])?;
    let first_moment = decode_section(&mut cur, counts[1])?;
    let second_moment = decode_section(&mut cur, counts[2])?;
    cur.finish()?;
    let ckpt = Checkpoint { config_hash, seed, step, params, first_moment, second_moment };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(ckpt)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let p = vec![
            NamedTensor::new("a", vec![2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap(),
            NamedTensor::new("b", vec![], vec![-1.5]).unwrap(),
        ];
        let zeros: Vec<NamedTensor> = p
            .iter()
            .map(|t| NamedTensor::new(t.name.clone(), t.shape.clone(), vec![0.0; t.data.len()]).unwrap())
            .collect();
        Checkpoint { config_hash: 0xdead_beef, seed: 7, step: 40, params: p, first_moment: zeros.clone(), second_moment: zeros }
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut c = sample();
        c.first_moment.clear();
        c.second_moment.clear();
        c.params.push(c.params[0].clone());
        assert!(matches!(encode_checkpoint(&c), Err(StoreError::DuplicateTensor(_))));
    }

    #[test]
    fn malformed_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(StoreError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(StoreError::BadMagic { .. })));
        let mut bad = bytes;
        bad.push(1);
        assert!(matches!(decode_checkpoint(&bad), Err(StoreError::TrailingBytes { .. })));
    }

    #[test]
    fn mismatched_moments_rejected() {
        let mut c = sample();
        c.first_moment.pop();
        assert!(c.validate().is_err());
    }
}
