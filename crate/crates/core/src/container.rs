//! The "CLB1" little-endian binary container shared by streams, parameter
//! checkpoints and memory dumps.
//!
//! Every file starts with the 4-byte magic `CLB1`, a `u16` format version and
//! a `u8` payload kind. Payload layouts are documented next to their encoders.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CLB1";
pub const VERSION: u16 = 1;
/// Sentinel for an absent task id in 32-bit task fields.
pub const NO_TASK: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Stream = 1,
    Params = 2,
    Memory = 3,
}

impl PayloadKind {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Stream),
            2 => Some(Self::Params),
            3 => Some(Self::Memory),
            _ => None,
        }
    }
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_header(kind: PayloadKind) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(MAGIC);
        w.put_u16(VERSION);
        w.put_u8(kind as u8);
        w
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn put_len(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))?;
        self.put_u32(v);
        Ok(())
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version and payload kind.
    pub fn open(bytes: &'a [u8], expected: PayloadKind) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic, expected CLB1".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let kind = r.u8()?;
        match PayloadKind::from_u8(kind) {
            Some(k) if k == expected => Ok(r),
            Some(k) => Err(Error::Format(format!(
                "payload kind {k:?}, expected {expected:?}"
            ))),
            None => Err(Error::Format(format!("unknown payload kind {kind}"))),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Reads a `u32` count and checks that `count * min_record` bytes remain,
    /// so a corrupted length fails fast instead of allocating.
    pub fn len(&mut self, min_record: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        let need = n.saturating_mul(min_record);
        if need > self.remaining() {
            return Err(Error::Format(format!(
                "length field {n} implies {need} bytes, only {} remain",
                self.remaining()
            )));
        }
        Ok(n)
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.remaining()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let bytes = Writer::with_header(PayloadKind::Params).into_bytes();
        assert!(Reader::open(&bytes, PayloadKind::Params).is_ok());
        assert!(matches!(
            Reader::open(&bytes, PayloadKind::Stream),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Reader::open(&bad, PayloadKind::Params).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = Reader::open(&v2, PayloadKind::Params).err().unwrap();
        assert!(err.to_string().contains("version"));
        assert!(Reader::open(&bytes[..5], PayloadKind::Params).is_err());
    }

    #[test]
    fn oversized_length_rejected() {
        let mut w = Writer::with_header(PayloadKind::Memory);
        w.put_u32(1_000_000);
        let bytes = w.into_bytes();
        let mut r = Reader::open(&bytes, PayloadKind::Memory).unwrap();
        assert!(r.len(4).is_err());
    }
}
