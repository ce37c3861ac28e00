use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{resample, Waveform};
use crate::error::{Error, Result};

/// Reads a PCM (8/16/24/32-bit) or IEEE float WAV file and averages its
/// channels into one.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = WavReader::new(BufReader::new(file)).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported encoding {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Degenerate(format!("{}: no audio frames", path.display())));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Mono waveform at `target_rate`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate == target_rate {
        return Ok(w);
    }
    let samples = resample(&w.samples, w.sample_rate, target_rate)
        .into_iter()
        .map(|s| s.clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, target_rate)
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(source) => Error::io(path, source),
        other => Error::Format(other.to_string()),
    })?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
