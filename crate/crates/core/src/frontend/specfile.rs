//! `SPEC` container: 16-byte header (magic, u32 bins, u32 frames, f32 floor)
//! followed by little-endian f32 values in row-major bin × frame order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::LogMelSpectrogram;
use crate::error::{Error, Result};

pub const SPEC_MAGIC: &[u8; 4] = b"SPEC";

pub fn write_spec_to(out: &mut impl Write, s: &LogMelSpectrogram) -> std::io::Result<()> {
    out.write_all(SPEC_MAGIC)?;
    out.write_all(&(s.bins() as u32).to_le_bytes())?;
    out.write_all(&(s.frames() as u32).to_le_bytes())?;
    out.write_all(&(s.floor_db() as f32).to_le_bytes())?;
    for &v in s.values() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_spec_from(input: &mut impl Read) -> Result<LogMelSpectrogram> {
    let mut header = [0u8; 16];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated SPEC header".into()))?;
    if &header[..4] != SPEC_MAGIC {
        return Err(Error::Format("missing SPEC magic".into()));
    }
    let word = |i: usize| [header[i], header[i + 1], header[i + 2], header[i + 3]];
    let bins = u32::from_le_bytes(word(4)) as usize;
    let frames = u32::from_le_bytes(word(8)) as usize;
    let floor = f32::from_le_bytes(word(12)) as f64;
    let mut raw = Vec::new();
    input
        .read_to_end(&mut raw)
        .map_err(|e| Error::Format(e.to_string()))?;
    if raw.len() != bins * frames * 4 {
        return Err(Error::Format(format!(
            "SPEC payload has {} bytes, expected {}",
            raw.len(),
            bins * frames * 4
        )));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    LogMelSpectrogram::new(values, bins, frames, floor)
}

pub fn write_spec(path: &Path, s: &LogMelSpectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + s.values().len() * 4);
    write_spec_to(&mut buf, s).expect("writing to memory");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_spec(path: &Path) -> Result<LogMelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_spec_from(&mut bytes.as_slice())
}
