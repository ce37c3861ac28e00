use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::{LogMelSpectrogram, MelFilterbank, Stft, Waveform};
use crate::error::{Error, Result};

const NNLS_ITERS: usize = 200;
const OUTPUT_PEAK: f64 = 0.9;
const SILENCE_PEAK: f64 = 1e-9;

/// Non-negative least-squares estimate of the linear magnitude spectrum whose
/// mel projection is `mel`, via multiplicative updates.
pub fn nnls_mel_to_linear(fb: &MelFilterbank, mel: &[f64]) -> Vec<f64> {
    let n = fb.n_freqs();
    let mut target = vec![0.0; n];
    fb.apply_transposed(mel, &mut target);
    let col_sum: Vec<f64> = (0..n)
        .map(|k| (0..fb.n_mels()).map(|m| fb.weight(m, k)).sum())
        .collect();
    let mut x: Vec<f64> = target
        .iter()
        .zip(&col_sum)
        .map(|(t, c)| if *c > 0.0 { t / c } else { 0.0 })
        .collect();
    let mut proj = vec![0.0; fb.n_mels()];
    let mut denom = vec![0.0; n];
    for _ in 0..NNLS_ITERS {
        fb.apply(&x, &mut proj);
        fb.apply_transposed(&proj, &mut denom);
        for ((xi, t), d) in x.iter_mut().zip(&target).zip(&denom) {
            if *d > 0.0 {
                *xi *= t / d;
            }
        }
    }
    x
}

/// Renders a log-mel spectrogram as audio: floor cells are treated as zero
/// energy, mel magnitudes are pseudo-inverted, and phase is recovered with
/// Griffin-Lim. The result is peak-normalized to 0.9 unless silent.
pub fn invert_to_audio(
    s: &LogMelSpectrogram,
    fb: &MelFilterbank,
    hop: usize,
    iterations: usize,
) -> Result<Waveform> {
    if iterations == 0 {
        return Err(Error::Contract("Griffin-Lim needs at least one iteration".into()));
    }
    if s.bins() != fb.n_mels() {
        return Err(Error::Contract(format!(
            "spectrogram has {} bins, filterbank {}",
            s.bins(),
            fb.n_mels()
        )));
    }
    let win = fb.n_fft;
    let stft = Stft::new(win, hop);
    let floor = s.floor_db();
    let magnitudes: Vec<Vec<f64>> = s
        .columns()
        .iter()
        .map(|col| {
            let mel: Vec<f64> = col
                .iter()
                .map(|&v| if v > floor { 10f64.powf(v / 20.0) } else { 0.0 })
                .collect();
            nnls_mel_to_linear(fb, &mel)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6c_696d);
    let mut spectra: Vec<Vec<Complex<f64>>> = magnitudes
        .iter()
        .map(|mags| {
            mags.iter()
                .map(|&m| Complex::from_polar(m, rng.random_range(-PI..PI)))
                .collect()
        })
        .collect();
    let mut signal = stft.synthesize(&spectra);
    for _ in 0..iterations {
        let estimate = stft.analyze(&signal);
        for ((frame, est), mags) in spectra.iter_mut().zip(&estimate).zip(&magnitudes) {
            for ((c, e), &m) in frame.iter_mut().zip(est).zip(mags) {
                let norm = e.norm();
                *c = if norm > 1e-12 {
                    e * (m / norm)
                } else {
                    Complex::new(m, 0.0)
                };
            }
        }
        signal = stft.synthesize(&spectra);
    }

    for v in &mut signal {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > SILENCE_PEAK {
        let gain = OUTPUT_PEAK / peak;
        signal.iter_mut().for_each(|v| *v *= gain);
    }
    Waveform::new(signal, fb.sample_rate)
}
