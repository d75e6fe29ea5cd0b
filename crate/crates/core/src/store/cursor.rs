use super::{Result, StoreError};

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(StoreError::Truncated {
            expected: usize::MAX,
            actual: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(StoreError::Truncated { expected: end, actual: self.buf.len() });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(StoreError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u16) -> Result<()> {
        let found = self.u16()?;
        if found != expected {
            return Err(StoreError::VersionMismatch { expected, found });
        }
        Ok(())
    }

    /// Require that exactly `n` bytes remain.
    pub fn expect_remaining(&self, n: usize) -> Result<()> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(StoreError::Truncated { expected: self.pos + n, actual: self.buf.len() });
        }
        if remaining > n {
            return Err(StoreError::TrailingBytes { extra: remaining - n });
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        self.expect_remaining(0)
    }
}
