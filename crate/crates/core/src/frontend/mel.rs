//! Mel scale, triangular filterbank, and the mel-center table used by the
//! pitch transformation.

use crate::error::{Error, Result};

/// Constant of the mel scale, `mel(h) = A·log10(1 + h/700)`.
pub const MEL_A: f64 = 2595.0;
const MEL_BREAK_HZ: f64 = 700.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    MEL_A * (1.0 + hz / MEL_BREAK_HZ).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    MEL_BREAK_HZ * (10f64.powf(mel / MEL_A) - 1.0)
}

/// Mel coordinates of the `bins` filter centers, evenly spaced on the mel axis.
///
/// Bin `i` (zero-based) sits at `first + i·step` mel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelAxis {
    pub first: f64,
    pub step: f64,
    pub bins: usize,
}

impl MelAxis {
    pub fn new(f_min: f64, f_max: f64, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Contract(format!("need at least 2 mel bins, got {bins}")));
        }
        if !(f_min >= 0.0 && f_max > f_min) {
            return Err(Error::Contract(format!(
                "invalid mel range [{f_min}, {f_max}] Hz"
            )));
        }
        let lo = hz_to_mel(f_min);
        let hi = hz_to_mel(f_max);
        let step = (hi - lo) / (bins + 1) as f64;
        Ok(Self {
            first: lo + step,
            step,
            bins,
        })
    }

    /// Default axis at 22.05 kHz between 50 Hz and Nyquist.
    pub fn standard(bins: usize) -> Self {
        Self::new(50.0, 11025.0, bins).expect("standard mel axis")
    }

    pub fn center(&self, bin: usize) -> f64 {
        self.first + bin as f64 * self.step
    }

    /// Fractional zero-based bin position of a mel value.
    pub fn position(&self, mel: f64) -> f64 {
        (mel - self.first) / self.step
    }

    pub fn center_hz(&self, bin: usize) -> f64 {
        mel_to_hz(self.center(bin))
    }
}

/// Triangular mel filterbank over the non-negative STFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Row-major `n_mels × n_freqs` weights.
    weights: Vec<f64>,
    n_mels: usize,
    n_freqs: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: u32,
    pub n_fft: usize,
}

impl MelFilterbank {
    /// Peak-normalized triangles whose edges sit on neighbouring centers, so
    /// the weights of adjacent filters sum to one between the first and last
    /// centers.
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, f_min: f64, f_max: f64) -> Result<Self> {
        if sample_rate == 0 || n_fft < 2 {
            return Err(Error::Contract("sample rate and FFT size must be positive".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if f_max > nyquist + 1e-9 {
            return Err(Error::Contract(format!(
                "f_max {f_max} Hz above Nyquist {nyquist} Hz"
            )));
        }
        let axis = MelAxis::new(f_min, f_max, n_mels)?;
        let n_freqs = n_fft / 2 + 1;
        let lo_mel = hz_to_mel(f_min);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo_mel + i as f64 * axis.step))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;

        let mut weights = vec![0.0; n_mels * n_freqs];
        for m in 0..n_mels {
            let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_freqs {
                let hz = k as f64 * bin_hz;
                let w = if hz > left && hz <= center {
                    (hz - left) / (center - left)
                } else if hz > center && hz < right {
                    (right - hz) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_freqs + k] = w;
            }
            let row_sum: f64 = weights[m * n_freqs..(m + 1) * n_freqs].iter().sum();
            if row_sum <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "mel filter {m} covers no STFT bin; use fewer mel bins or a longer window"
                )));
            }
        }
        Ok(Self {
            weights,
            n_mels,
            n_freqs,
            f_min,
            f_max,
            sample_rate,
            n_fft,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_freqs..(mel + 1) * self.n_freqs]
    }

    pub fn weight(&self, mel: usize, freq: usize) -> f64 {
        self.weights[mel * self.n_freqs + freq]
    }

    pub fn axis(&self) -> MelAxis {
        MelAxis::new(self.f_min, self.f_max, self.n_mels).expect("validated at construction")
    }

    /// Mel energies of one magnitude spectrum.
    pub fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        debug_assert_eq!(spectrum.len(), self.n_freqs);
        for (m, o) in out.iter_mut().enumerate() {
            *o = self
                .row(m)
                .iter()
                .zip(spectrum)
                .map(|(w, s)| w * s)
                .sum();
        }
    }

    /// Transposed application, `Wᵀ·mel`.
    pub fn apply_transposed(&self, mel: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (m, &v) in mel.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(m)) {
                *o += w * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_round_trip() {
        for hz in [0.0, 50.0, 440.0, 1000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - MEL_A * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn filterbank_columns_partition_energy() {
        let fb = MelFilterbank::new(22050, 1024, 64, 50.0, 11025.0).unwrap();
        let bin_hz = 22050.0 / 1024.0;
        for k in 0..fb.n_freqs() {
            let hz = k as f64 * bin_hz;
            let col: f64 = (0..fb.n_mels()).map(|m| fb.weight(m, k)).sum();
            assert!(col <= 1.0 + 1e-6, "bin {k} sums to {col}");
            if hz > fb.f_min && hz < fb.f_max {
                assert!(col > 0.0, "bin {k} ({hz} Hz) uncovered");
            }
        }
        for m in 0..fb.n_mels() {
            assert!(fb.row(m).iter().all(|&w| w >= 0.0));
            assert!(fb.row(m).iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn rows_ordered_by_center() {
        let fb = MelFilterbank::new(16000, 512, 40, 0.0, 8000.0).unwrap();
        let peak = |m: usize| {
            fb.row(m)
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc })
                .0
        };
        for m in 1..fb.n_mels() {
            assert!(peak(m) >= peak(m - 1));
        }
    }

    #[test]
    fn too_many_mels_is_degenerate() {
        assert!(matches!(
            MelFilterbank::new(8000, 64, 128, 0.0, 4000.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn axis_centers_are_uniform_in_mel() {
        let axis = MelAxis::standard(8);
        for i in 0..8 {
            assert!((axis.position(axis.center(i)) - i as f64).abs() < 1e-12);
        }
    }
}
