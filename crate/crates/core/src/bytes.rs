//! Offset-tracking little-endian reader shared by the binary file formats.
//! Every failure reports where in the stream it happened and how many bytes
//! the file would have needed, so truncation diagnostics stay precise.

use crate::error::{Error, Result};

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(format!(
                "truncated at offset {}: {what} needs {} bytes, file has {}",
                self.pos,
                self.pos + n,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: &[u8; 4], label: &str) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(format!(
                "bad {label} magic at offset {at}: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    /// Payload of `n` f32 values; a shortfall reports expected vs actual
    /// payload bytes.
    pub fn f32_payload(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let need = n * 4;
        if self.remaining() < need {
            return Err(Error::format(format!(
                "truncated at offset {}: {what} declares {} payload bytes, {} present",
                self.pos,
                need,
                self.remaining()
            )));
        }
        let raw = self.take(need, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn push_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    out.reserve(vs.len() * 4);
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
