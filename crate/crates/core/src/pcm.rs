//! Raw 16-bit little-endian mono PCM.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_pcm16(samples: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 2);
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pcm16(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::param("pcm", "odd byte count for 16-bit samples"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| f64::from(i16::from_le_bytes([b[0], b[1]])) / 32767.0)
        .collect())
}

pub fn write_pcm16(path: &Path, samples: &[f64]) -> Result<()> {
    std::fs::write(path, encode_pcm16(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_pcm16(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pcm16(&bytes)
}
