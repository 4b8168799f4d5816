//! Little-endian byte helpers shared by the EMB1, MLP1 and RUN1 formats.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("unexpected end of data: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },
    #[error("non-finite value in payload at offset {offset}")]
    NonFinite { offset: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }

    /// u64 length prefix followed by the bytes.
    pub fn block(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), CodecError> {
        let found = self.array::<4>()?;
        if &found != expected {
            return Err(CodecError::BadMagic { expected: *expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), CodecError> {
        let found = self.u32()?;
        if found != expected {
            return Err(CodecError::BadVersion { expected, found });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// Reads `n` f32 values, rejecting NaN and infinities.
    pub fn finite_f32s(&mut self, n: usize) -> Result<Vec<f32>, CodecError> {
        let start = self.pos;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| overflow(n))?)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
            if !v.is_finite() {
                return Err(CodecError::NonFinite { offset: start + 4 * i });
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn finite_f64s(&mut self, n: usize) -> Result<Vec<f64>, CodecError> {
        let start = self.pos;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| overflow(n))?)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
            if !v.is_finite() {
                return Err(CodecError::NonFinite { offset: start + 8 * i });
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn block(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| overflow(len as usize))?;
        self.take(len)
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::Invalid(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn overflow(n: usize) -> CodecError {
    CodecError::Invalid(format!("element count {n} overflows"))
}
