//! Little-endian cursor helpers shared by the binary formats.

use crate::error::Error;

pub(crate) struct Reader<'a> {
    path: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a str, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn err_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err_at(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), Error> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.err_at(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, Error> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, Error> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn i64(&mut self, what: &str) -> Result<i64, Error> {
        let b = self.take(8, what)?;
        Ok(i64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Reads `n` finite f32 values, widened to f64.
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, Error> {
        let start = self.pos;
        let b = self.take(n * 4, what)?;
        b.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(self.err_at(start + 4 * i, format!("non-finite value in {what}")))
                }
            })
            .collect()
    }

    /// Validates the CRC32 of everything read so far against the next u32.
    pub fn header_crc(&mut self) -> Result<(), Error> {
        let end = self.pos;
        let expected = crc32fast::hash(&self.bytes[..end]);
        let got = self.u32("header checksum")?;
        if got != expected {
            return Err(self.err_at(end, format!("header checksum {got:#010x} != {expected:#010x}")));
        }
        Ok(())
    }

    pub fn expect_end(&self, expected_total: usize) -> Result<(), Error> {
        if self.bytes.len() != expected_total {
            return Err(self.err_at(
                self.bytes.len().min(expected_total),
                format!(
                    "file length {} bytes, expected {expected_total}",
                    self.bytes.len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Narrows to f32; fails on values that do not fit.
    pub fn f32s(&mut self, values: &[f64]) -> Result<(), String> {
        self.buf.reserve(values.len() * 4);
        for (i, &v) in values.iter().enumerate() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(format!("value {v} at index {i} is not representable as f32"));
            }
            self.buf.extend_from_slice(&f.to_le_bytes());
        }
        Ok(())
    }

    pub fn header_crc(&mut self) {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
    }
}

pub(crate) fn dim_u32(v: usize, what: &str) -> Result<u32, Error> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} exceeds u32")))
}
