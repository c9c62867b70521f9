//! File helpers: atomic writes and raw interleaved IQ captures.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Sample encoding of an IQ capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IqFormat {
    /// Interleaved little-endian `f32` pairs (re, im).
    F32,
    /// Interleaved little-endian `f64` pairs.
    F64,
}

impl IqFormat {
    pub fn bytes_per_sample(self) -> usize {
        match self {
            IqFormat::F32 => 8,
            IqFormat::F64 => 16,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" | "cf32" => Ok(IqFormat::F32),
            "f64" | "cf64" => Ok(IqFormat::F64),
            other => Err(Error::Config(format!("unknown IQ format {other:?} (use f32 or f64)"))),
        }
    }
}

pub fn encode_iq(samples: &[Complex64], format: IqFormat) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * format.bytes_per_sample());
    for s in samples {
        match format {
            IqFormat::F32 => {
                out.extend_from_slice(&(s.re as f32).to_le_bytes());
                out.extend_from_slice(&(s.im as f32).to_le_bytes());
            }
            IqFormat::F64 => {
                out.extend_from_slice(&s.re.to_le_bytes());
                out.extend_from_slice(&s.im.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_iq(bytes: &[u8], format: IqFormat) -> Result<Vec<Complex64>> {
    let width = format.bytes_per_sample();
    if bytes.len() % width != 0 {
        return Err(Error::Format(format!(
            "IQ capture of {} bytes is not a multiple of {width}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| match format {
            IqFormat::F32 => Complex64::new(
                f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
            ),
            IqFormat::F64 => Complex64::new(
                f64::from_le_bytes(c[0..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..16].try_into().unwrap()),
            ),
        })
        .collect())
}

pub fn write_iq_file(path: &Path, samples: &[Complex64], format: IqFormat) -> Result<()> {
    write_atomic(path, &encode_iq(samples, format))
}

pub fn read_iq_file(path: &Path, format: IqFormat) -> Result<Vec<Complex64>> {
    decode_iq(&fs::read(path)?, format)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_is_exact_and_f32_is_rounded() {
        let s = vec![Complex64::new(0.1, -2.5), Complex64::new(1e-3, 7.0)];
        let back = decode_iq(&encode_iq(&s, IqFormat::F64), IqFormat::F64).unwrap();
        assert_eq!(back, s);
        let back = decode_iq(&encode_iq(&s, IqFormat::F32), IqFormat::F32).unwrap();
        for (a, b) in back.iter().zip(&s) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn f32_layout_is_interleaved_le() {
        let bytes = encode_iq(&[Complex64::new(1.0, -1.0)], IqFormat::F32);
        assert_eq!(bytes, [0, 0, 128, 63, 0, 0, 128, 191]);
    }

    #[test]
    fn ragged_capture_rejected() {
        assert!(decode_iq(&[0u8; 12], IqFormat::F32).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
