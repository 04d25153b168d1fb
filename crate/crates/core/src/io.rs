//! Little-endian byte reading with offset-carrying errors.

use crate::error::{Error, Result};
use crate::tensor::{DType, Element};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub fn fail<T>(&self, at: u64, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: at, message: message.into() })
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return self.fail(self.pos(), format!("truncated {what}: need {n} bytes, {left} available"));
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

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// `n` elements of `T`, whose dtype the caller has already checked.
    pub fn values<T: Element>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let size = T::DTYPE.size_of();
        let bytes = n
            .checked_mul(size)
            .ok_or_else(|| Error::Format { offset: self.pos(), message: format!("{what} size overflows") })?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(size).map(T::read_le).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(self.pos(), format!("{} unexpected trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// Checks a dtype code against the element type being read.
pub(crate) fn expect_dtype<T: Element>(r: &ByteReader, code: u8, at: u64) -> Result<()> {
    match DType::from_code(code) {
        Some(d) if d == T::DTYPE => Ok(()),
        Some(d) => r.fail(at, format!("stored dtype {d:?} but {:?} was requested", T::DTYPE)),
        None => r.fail(at, format!("unknown dtype code {code}")),
    }
}
