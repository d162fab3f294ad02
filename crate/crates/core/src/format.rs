//! Byte-level helpers shared by the dataset and checkpoint file formats.
//! Readers track their absolute offset so every failure names the byte
//! where the file stopped making sense.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{DvtError, Result};

pub(crate) struct Reader<R: Read> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Reader {
            inner,
            offset: 0,
            path: path.to_path_buf(),
        }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn error(&self, details: impl Into<String>) -> DvtError {
        DvtError::Format {
            path: self.path.display().to_string(),
            details: details.into(),
        }
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.error(format!("truncated at byte {}", self.offset)))
            }
            Err(e) => Err(DvtError::Io(e)),
        }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        Ok(buf)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4], label: &str) -> Result<()> {
        let at = self.offset;
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(self.error(format!(
                "bad magic at byte {at}: expected {label} ({expected:?}), found {buf:?}"
            )));
        }
        Ok(())
    }

    pub(crate) fn u32_le(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub(crate) fn u64_le(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    /// Reads `n` little-endian f32 values, widening to f64.
    pub(crate) fn f32_values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    /// Reads `n` little-endian f64 values.
    pub(crate) fn f64_values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect())
    }

    /// Confirms the stream is exhausted.
    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.error(format!("trailing data at byte {}", self.offset))),
            Err(e) => Err(DvtError::Io(e)),
        }
    }
}

/// Bit-packs a boolean row, least-significant bit first within each byte.
pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// Inverse of `pack_bits` for a row of known length.
pub(crate) fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}
