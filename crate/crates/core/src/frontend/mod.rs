//! Audio front end: WAV ingestion, log-mel analysis, and inversion back to
//! audio for auditioning prototypes.

mod invert;
mod mel;
mod resample;
mod specfile;
mod stft;
mod wav;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use invert::{invert_to_audio, nnls_mel_to_linear};
pub use mel::{hz_to_mel, mel_to_hz, MelAxis, MelFilterbank, MEL_A};
pub use resample::resample;
pub use specfile::{read_spec, read_spec_from, write_spec, write_spec_to, SPEC_MAGIC};
pub use stft::{frame_count, hann, Stft};
pub use wav::{load_audio, read_wav, write_wav};

/// Added to mel magnitudes before taking the logarithm.
pub const LOG_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// `F × T` grid of log-magnitudes, stored row-major (one row per mel bin).
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    values: Vec<f64>,
    bins: usize,
    frames: usize,
    floor_db: f64,
}

impl LogMelSpectrogram {
    pub fn new(values: Vec<f64>, bins: usize, frames: usize, floor_db: f64) -> Result<Self> {
        if bins < 2 || frames < 1 {
            return Err(Error::Degenerate(format!(
                "spectrogram must be at least 2×1, got {bins}×{frames}"
            )));
        }
        if values.len() != bins * frames {
            return Err(Error::Contract(format!(
                "{} values for a {bins}×{frames} spectrogram",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < floor_db) {
            return Err(Error::Data(format!(
                "entry {v} is non-finite or below floor {floor_db}"
            )));
        }
        Ok(Self {
            values,
            bins,
            frames,
            floor_db,
        })
    }

    /// Like `new`, but raises entries below the floor to it.
    pub fn clamped(mut values: Vec<f64>, bins: usize, frames: usize, floor_db: f64) -> Result<Self> {
        for v in &mut values {
            if *v < floor_db {
                *v = floor_db;
            }
        }
        Self::new(values, bins, frames, floor_db)
    }

    pub fn filled(bins: usize, frames: usize, value: f64, floor_db: f64) -> Result<Self> {
        Self::new(vec![value; bins * frames], bins, frames, floor_db)
    }

    /// Repeats a spectral column over `frames` time steps.
    pub fn tiled(column: &[f64], frames: usize, floor_db: f64) -> Result<Self> {
        let bins = column.len();
        let mut values = Vec::with_capacity(bins * frames);
        for &v in column {
            values.extend(std::iter::repeat_n(v, frames));
        }
        Self::clamped(values, bins, frames, floor_db)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn floor_db(&self) -> f64 {
        self.floor_db
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|f| self.get(f, frame)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.frames).map(|t| self.column(t)).collect()
    }

    /// Frames `start .. start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let mut values = Vec::with_capacity(self.bins * len);
        for f in 0..self.bins {
            let row = &self.values[f * self.frames..(f + 1) * self.frames];
            values.extend_from_slice(&row[start..start + len]);
        }
        Self {
            values,
            bins: self.bins,
            frames: len,
            floor_db: self.floor_db,
        }
    }

    /// Right-pads with `floor_db` columns up to `frames` (no-op if already as long).
    pub fn pad_to(&self, frames: usize) -> Self {
        if frames <= self.frames {
            return self.clone();
        }
        let mut values = Vec::with_capacity(self.bins * frames);
        for f in 0..self.bins {
            values.extend_from_slice(&self.values[f * self.frames..(f + 1) * self.frames]);
            values.extend(std::iter::repeat_n(self.floor_db, frames - self.frames));
        }
        Self {
            values,
            bins: self.bins,
            frames,
            floor_db: self.floor_db,
        }
    }

    /// Mean over time of every bin.
    pub fn mean_column(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|f| {
                self.values[f * self.frames..(f + 1) * self.frames]
                    .iter()
                    .sum::<f64>()
                    / self.frames as f64
            })
            .collect()
    }
}

/// Parameters of the analysis chain.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub floor_db: f64,
    pub griffin_lim_iters: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_mels: 64,
            win: 1024,
            hop: 256,
            f_min: 50.0,
            f_max: None,
            floor_db: -80.0,
            griffin_lim_iters: 32,
        }
    }
}

impl FrontendConfig {
    pub fn f_max_hz(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(self.sample_rate, self.win, self.n_mels, self.f_min, self.f_max_hz())
    }

    pub fn mel_axis(&self) -> Result<MelAxis> {
        MelAxis::new(self.f_min, self.f_max_hz(), self.n_mels)
    }

    pub fn analyze(&self, w: &Waveform) -> Result<LogMelSpectrogram> {
        compute_logmel(w, &self.filterbank()?, self.win, self.hop, self.floor_db)
    }
}

/// Log-mel analysis: `max(floor_db, 20·log10(mel magnitude + ε))` per cell.
pub fn compute_logmel(
    w: &Waveform,
    fb: &MelFilterbank,
    win: usize,
    hop: usize,
    floor_db: f64,
) -> Result<LogMelSpectrogram> {
    if hop == 0 || win < hop {
        return Err(Error::Contract(format!(
            "need win ≥ hop > 0, got win={win} hop={hop}"
        )));
    }
    if fb.n_fft != win {
        return Err(Error::Contract(format!(
            "filterbank built for n_fft={} but window is {win}",
            fb.n_fft
        )));
    }
    if w.len() < win {
        return Err(Error::Degenerate(format!(
            "waveform has {} samples, fewer than one {win}-sample frame",
            w.len()
        )));
    }
    let stft = Stft::new(win, hop);
    let spectra = stft.analyze(&w.samples);
    let frames = spectra.len();
    let bins = fb.n_mels();
    let mut values = vec![0.0; bins * frames];
    let mut mag = vec![0.0; fb.n_freqs()];
    let mut mel = vec![0.0; bins];
    for (t, spec) in spectra.iter().enumerate() {
        for (m, c) in mag.iter_mut().zip(spec) {
            *m = c.norm();
        }
        fb.apply(&mag, &mut mel);
        for (f, &e) in mel.iter().enumerate() {
            values[f * frames + t] = (20.0 * (e + LOG_EPS).log10()).max(floor_db);
        }
    }
    LogMelSpectrogram::new(values, bins, frames, floor_db)
}

/// Fixed-width view for batching: a seeded random crop when long enough,
/// otherwise right-padding with the floor value.
pub fn tile_or_crop(s: &LogMelSpectrogram, frames: usize, seed: u64) -> Result<LogMelSpectrogram> {
    if frames == 0 {
        return Err(Error::Contract("target frame count must be ≥ 1".into()));
    }
    Ok(if s.frames() > frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = rng.random_range(0..=s.frames() - frames);
        s.slice_frames(start, frames)
    } else {
        s.pad_to(frames)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Waveform {
        let samples = (0..len)
            .map(|n| amp * (2.0 * PI * freq * n as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 4096], cfg.sample_rate).unwrap();
        let s = cfg.analyze(&w).unwrap();
        assert!(s.values().iter().all(|&v| v == cfg.floor_db));
    }

    #[test]
    fn frame_count_formula() {
        let cfg = FrontendConfig {
            sample_rate: 16000,
            ..Default::default()
        };
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert_eq!(cfg.analyze(&w).unwrap().frames(), 59);
    }

    #[test]
    fn too_short_is_degenerate() {
        let cfg = FrontendConfig::default();
        let w = Waveform::new(vec![0.0; 100], cfg.sample_rate).unwrap();
        assert!(matches!(cfg.analyze(&w), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tone_at_center_dominates_its_bin() {
        let cfg = FrontendConfig::default();
        let fb = cfg.filterbank().unwrap();
        let bin = 40;
        let hz = cfg.mel_axis().unwrap().center_hz(bin);
        let s = cfg.analyze(&sine(hz, cfg.sample_rate, 8192, 0.5)).unwrap();
        let col = s.column(s.frames() / 2);
        let argmax = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, bin);
        assert!(col[bin] - col[bin - 2] >= 20.0);
        assert!(col[bin] - col[bin + 2] >= 20.0);

        // Same frame through a naive DFT at the tone frequency.
        let win = hann(cfg.win);
        let start = (s.frames() / 2) * cfg.hop;
        let samples = &sine(hz, cfg.sample_rate, 8192, 0.5).samples[start..start + cfg.win];
        let mut mag = vec![0.0; fb.n_freqs()];
        for (k, m) in mag.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in samples.iter().enumerate() {
                let ph = -2.0 * PI * k as f64 * n as f64 / cfg.win as f64;
                re += x * win[n] * ph.cos();
                im += x * win[n] * ph.sin();
            }
            *m = (re * re + im * im).sqrt();
        }
        let energy: f64 = fb.row(bin).iter().zip(&mag).map(|(w, m)| w * m).sum();
        let db = 20.0 * (energy + LOG_EPS).log10();
        assert!((db - col[bin]).abs() < 1e-6);
    }

    #[test]
    fn hop_shift_moves_columns() {
        let cfg = FrontendConfig::default();
        let base = sine(1234.5, cfg.sample_rate, 8192, 0.3);
        let mut shifted = vec![0.0; cfg.hop];
        shifted.extend_from_slice(&base.samples);
        let shifted = Waveform::new(shifted, cfg.sample_rate).unwrap();
        let a = cfg.analyze(&base).unwrap();
        let b = cfg.analyze(&shifted).unwrap();
        for t in 0..a.frames() {
            for f in 0..a.bins() {
                let (x, y) = (a.get(f, t), b.get(f, t + 1));
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn crop_and_pad() {
        let vals: Vec<f64> = (0..20).map(|v| -(v as f64)).collect();
        let s = LogMelSpectrogram::new(vals, 2, 10, -80.0).unwrap();
        assert_eq!(tile_or_crop(&s, 10, 1).unwrap(), s);
        let p = tile_or_crop(&s, 16, 1).unwrap();
        for f in 0..2 {
            for t in 0..10 {
                assert_eq!(p.get(f, t), s.get(f, t));
            }
            for t in 10..16 {
                assert_eq!(p.get(f, t), -80.0);
            }
        }
        let long = LogMelSpectrogram::filled(2, 100, -1.0, -80.0).unwrap();
        let long = LogMelSpectrogram::new(
            long.values().iter().enumerate().map(|(i, _)| -((i % 100) as f64) * 0.5).collect(),
            2,
            100,
            -80.0,
        )
        .unwrap();
        let c1 = tile_or_crop(&long, 32, 7).unwrap();
        let c2 = tile_or_crop(&long, 32, 7).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(c1.frames(), 32);
    }

    #[test]
    fn rejects_entries_below_floor() {
        assert!(LogMelSpectrogram::new(vec![-90.0, 0.0], 2, 1, -80.0).is_err());
        let s = LogMelSpectrogram::clamped(vec![-90.0, 0.0], 2, 1, -80.0).unwrap();
        assert_eq!(s.values(), &[-80.0, 0.0]);
    }
}
