use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// Short-time Fourier transform without centering. Frame `t` covers samples
/// `t·hop .. t·hop + win`.
pub struct Stft {
    win: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            win,
            hop,
            window: hann(win),
            forward: planner.plan_fft_forward(win),
            inverse: planner.plan_fft_inverse(win),
        }
    }

    pub fn n_freqs(&self) -> usize {
        self.win / 2 + 1
    }

    /// Complex spectra of every frame, `frames × n_freqs`.
    pub fn analyze(&self, signal: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let frames = frame_count(signal.len(), self.win, self.hop);
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        (0..frames)
            .map(|t| {
                let start = t * self.hop;
                for (n, b) in buf.iter_mut().enumerate() {
                    *b = Complex::new(signal[start + n] * self.window[n], 0.0);
                }
                self.forward.process(&mut buf);
                buf[..self.n_freqs()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of `analyze`.
    pub fn synthesize(&self, frames: &[Vec<Complex<f64>>]) -> Vec<f64> {
        if frames.is_empty() {
            return Vec::new();
        }
        let len = self.win + (frames.len() - 1) * self.hop;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        let half = self.n_freqs();
        for (t, frame) in frames.iter().enumerate() {
            buf[..half].copy_from_slice(frame);
            for k in half..self.win {
                buf[k] = frame[self.win - k].conj();
            }
            self.inverse.process(&mut buf);
            let start = t * self.hop;
            for n in 0..self.win {
                let w = self.window[n];
                out[start + n] += buf[n].re / self.win as f64 * w;
                norm[start + n] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}
