//! Spectral transformations applied to a prototype column: additive gain,
//! mel-aware pitch shift, and additive low/high hinge filters, composed in
//! that order per time step.
//!
//! Everything here works on log-magnitude columns of length `F`. Frequency
//! positions are 1-based in the filter formulas and 0-based in storage.

use crate::error::{Error, Result};
use crate::frontend::{LogMelSpectrogram, MelAxis, MEL_A};

pub const SHIFT_MIN: f64 = 0.25;
pub const SHIFT_MAX: f64 = 4.0;

/// Mel-aware pitch map: the mel value that lands on `mel` after scaling the
/// underlying frequency by `s`.
pub fn mel_shift(mel: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Contract(format!("pitch ratio must be positive, got {s}")));
    }
    if !(mel >= 0.0) {
        return Err(Error::Contract(format!("mel coordinate must be ≥ 0, got {mel}")));
    }
    Ok(shift_from_base(mel_base(mel), s))
}

/// `10^{f/A} − 1`, the linear-frequency factor behind a mel value.
fn mel_base(mel: f64) -> f64 {
    10f64.powf(mel / MEL_A) - 1.0
}

fn shift_from_base(base: f64, s: f64) -> f64 {
    MEL_A * (1.0 + s * base).log10()
}

/// ∂Φ/∂s.
fn shift_derivative(base: f64, s: f64) -> f64 {
    MEL_A / std::f64::consts::LN_10 * base / (1.0 + s * base)
}

/// Which transformations participate in a reconstruction. Disabled ones act
/// as the identity whatever their parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EnabledMask {
    pub gain: bool,
    pub pitch: bool,
    pub low: bool,
    pub high: bool,
}

impl EnabledMask {
    pub const NONE: Self = Self {
        gain: false,
        pitch: false,
        low: false,
        high: false,
    };
    pub const ALL: Self = Self {
        gain: true,
        pitch: true,
        low: true,
        high: true,
    };
}

/// Additive hinge ramp: slope in dB per bin, cutoff as a 1-based bin position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Filter {
    pub slope: f64,
    pub cutoff: f64,
}

impl Filter {
    pub fn neutral(bins: usize) -> Self {
        Self {
            slope: 0.0,
            cutoff: 1.0 + (bins as f64 - 1.0) / 2.0,
        }
    }
}

/// Per-time-step parameters for one prototype on one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformParams {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub low: Vec<Filter>,
    pub high: Vec<Filter>,
    pub enabled: EnabledMask,
}

impl TransformParams {
    pub fn neutral(bins: usize, frames: usize, enabled: EnabledMask) -> Self {
        Self {
            gain: vec![0.0; frames],
            shift: vec![1.0; frames],
            low: vec![Filter::neutral(bins); frames],
            high: vec![Filter::neutral(bins); frames],
            enabled,
        }
    }

    pub fn frames(&self) -> usize {
        self.gain.len()
    }

    /// Parameters restricted to the first `frames` time steps.
    pub fn truncated(&self, frames: usize) -> Self {
        Self {
            gain: self.gain[..frames].to_vec(),
            shift: self.shift[..frames].to_vec(),
            low: self.low[..frames].to_vec(),
            high: self.high[..frames].to_vec(),
            enabled: self.enabled,
        }
    }

    fn check(&self, bins: usize) -> Result<()> {
        let t = self.gain.len();
        if self.shift.len() != t || self.low.len() != t || self.high.len() != t {
            return Err(Error::Contract("parameter vectors differ in length".into()));
        }
        for &s in &self.shift {
            if !(SHIFT_MIN..=SHIFT_MAX).contains(&s) {
                return Err(Error::Contract(format!(
                    "pitch ratio {s} outside [{SHIFT_MIN}, {SHIFT_MAX}]"
                )));
            }
        }
        let hi = bins as f64;
        for f in self.low.iter().chain(&self.high) {
            if !(1.0..=hi).contains(&f.cutoff) || !f.slope.is_finite() {
                return Err(Error::Contract(format!("filter {f:?} outside [1, {bins}]")));
            }
        }
        if self.gain.iter().any(|g| !g.is_finite()) {
            return Err(Error::Contract("non-finite gain".into()));
        }
        Ok(())
    }
}

/// Cotangents with respect to a prototype and its per-time-step parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformGrads {
    pub prototype: Vec<f64>,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub low_slope: Vec<f64>,
    pub low_cutoff: Vec<f64>,
    pub high_slope: Vec<f64>,
    pub high_cutoff: Vec<f64>,
}

impl TransformGrads {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        Self {
            prototype: vec![0.0; bins],
            gain: vec![0.0; frames],
            shift: vec![0.0; frames],
            low_slope: vec![0.0; frames],
            low_cutoff: vec![0.0; frames],
            high_slope: vec![0.0; frames],
            high_cutoff: vec![0.0; frames],
        }
    }
}

pub fn apply_gain(m: &[f64], g: f64) -> Vec<f64> {
    m.iter().map(|v| v + g).collect()
}

/// Pitch shift of one column, reading `fill` where the shifted coordinate
/// leaves the bin range.
pub fn apply_pitch(m: &[f64], s: f64, axis: &MelAxis, fill: f64) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for (f, o) in out.iter_mut().enumerate() {
        *o = PitchTap::new(axis, mel_base(axis.center(f)), f, s).read(m, fill);
    }
    out
}

pub fn apply_freq_filters(m: &[f64], low: Filter, high: Filter) -> Vec<f64> {
    m.iter()
        .enumerate()
        .map(|(i, v)| {
            let f = (i + 1) as f64;
            v + low.slope * (low.cutoff - f).max(0.0) + high.slope * (f - high.cutoff).max(0.0)
        })
        .collect()
}

/// Where output bin `f` reads from in the unshifted column. Positions within
/// one bin of either edge blend toward `fill`, which sits at virtual bins
/// `-1` and `F`; anything further out reads `fill` alone.
#[derive(Debug, Clone, Copy)]
struct PitchTap {
    inside: bool,
    /// Left neighbour, `-1` for the virtual fill bin below the axis.
    lower: isize,
    weight: f64,
    /// ∂(fractional source position)/∂s.
    position_ds: f64,
}

impl PitchTap {
    fn new(axis: &MelAxis, base: f64, f: usize, s: f64) -> Self {
        let bins = axis.bins as isize;
        let position_ds = shift_derivative(base, s) / axis.step;
        if s == 1.0 {
            let lower = (f as isize).min(bins - 2);
            return Self {
                inside: true,
                lower,
                weight: (f as isize - lower) as f64,
                position_ds,
            };
        }
        let u = axis.position(shift_from_base(base, s));
        if !(-1.0..=bins as f64).contains(&u) {
            return Self {
                inside: false,
                lower: 0,
                weight: 0.0,
                position_ds,
            };
        }
        let lower = (u.floor() as isize).min(bins - 1);
        Self {
            inside: true,
            lower,
            weight: u - lower as f64,
            position_ds,
        }
    }

    fn value(m: &[f64], i: isize, fill: f64) -> f64 {
        if i < 0 || i as usize >= m.len() {
            fill
        } else {
            m[i as usize]
        }
    }

    fn read(&self, m: &[f64], fill: f64) -> f64 {
        if !self.inside {
            return fill;
        }
        let a = Self::value(m, self.lower, fill);
        if self.weight == 0.0 {
            a
        } else {
            let b = Self::value(m, self.lower + 1, fill);
            if self.weight == 1.0 {
                b
            } else {
                a + self.weight * (b - a)
            }
        }
    }

    /// Spreads `d` onto the real neighbours and returns ∂read/∂s · d.
    fn backward(&self, m: &[f64], fill: f64, d: f64, d_m: &mut [f64]) -> f64 {
        if !self.inside {
            return 0.0;
        }
        let (lo, hi) = (self.lower, self.lower + 1);
        if lo >= 0 {
            d_m[lo as usize] += (1.0 - self.weight) * d;
        }
        if (hi as usize) < m.len() {
            d_m[hi as usize] += self.weight * d;
        }
        d * (Self::value(m, hi, fill) - Self::value(m, lo, fill)) * self.position_ds
    }
}

/// Reconstruction of a spectrogram by one transformed prototype.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// One length-`F` column per time step.
    pub columns: Vec<Vec<f64>>,
    taps: Vec<Vec<PitchTap>>,
    gained: Vec<Vec<f64>>,
}

impl Reconstruction {
    pub fn frames(&self) -> usize {
        self.columns.len()
    }

    /// Row-major `F × T` values.
    pub fn to_row_major(&self) -> Vec<f64> {
        let bins = self.columns.first().map_or(0, Vec::len);
        let mut out = vec![0.0; bins * self.frames()];
        for (t, col) in self.columns.iter().enumerate() {
            for (f, v) in col.iter().enumerate() {
                out[f * self.frames() + t] = *v;
            }
        }
        out
    }

    /// As a spectrogram, clamped to `floor_db`.
    pub fn to_spectrogram(&self, floor_db: f64) -> Result<LogMelSpectrogram> {
        let bins = self.columns.first().map_or(0, Vec::len);
        LogMelSpectrogram::clamped(self.to_row_major(), bins, self.frames(), floor_db)
    }
}

/// The transformation family bound to a mel axis and an out-of-range fill value.
#[derive(Debug, Clone)]
pub struct SpectralTransforms {
    axis: MelAxis,
    fill: f64,
    bases: Vec<f64>,
}

impl SpectralTransforms {
    pub fn new(axis: MelAxis, fill: f64) -> Self {
        let bases = (0..axis.bins).map(|f| mel_base(axis.center(f))).collect();
        Self { axis, fill, bases }
    }

    pub fn bins(&self) -> usize {
        self.axis.bins
    }

    pub fn axis(&self) -> &MelAxis {
        &self.axis
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }

    fn taps(&self, s: f64) -> Vec<PitchTap> {
        self.bases
            .iter()
            .enumerate()
            .map(|(f, &b)| PitchTap::new(&self.axis, b, f, s))
            .collect()
    }

    /// Gain, then pitch, then low filter, then high filter, for every time step.
    pub fn compose(&self, prototype: &[f64], params: &TransformParams) -> Result<Reconstruction> {
        let bins = self.bins();
        if prototype.len() != bins {
            return Err(Error::Contract(format!(
                "prototype has {} bins, transforms expect {bins}",
                prototype.len()
            )));
        }
        params.check(bins)?;
        let en = params.enabled;
        let frames = params.frames();
        let mut columns = Vec::with_capacity(frames);
        let mut taps = Vec::with_capacity(frames);
        let mut gained = Vec::with_capacity(frames);
        for t in 0..frames {
            let m = if en.gain {
                apply_gain(prototype, params.gain[t])
            } else {
                prototype.to_vec()
            };
            let (mut col, tap) = if en.pitch && params.shift[t] != 1.0 {
                let tap = self.taps(params.shift[t]);
                (tap.iter().map(|p| p.read(&m, self.fill)).collect(), tap)
            } else if en.pitch {
                (m.clone(), self.taps(1.0))
            } else {
                (m.clone(), Vec::new())
            };
            if en.low {
                let low = params.low[t];
                for (i, v) in col.iter_mut().enumerate() {
                    *v += low.slope * (low.cutoff - (i + 1) as f64).max(0.0);
                }
            }
            if en.high {
                let high = params.high[t];
                for (i, v) in col.iter_mut().enumerate() {
                    *v += high.slope * ((i + 1) as f64 - high.cutoff).max(0.0);
                }
            }
            columns.push(col);
            taps.push(tap);
            gained.push(m);
        }
        Ok(Reconstruction {
            columns,
            taps,
            gained,
        })
    }

    /// Exact gradients of `upstream · reconstruction_error(x, R)` with
    /// respect to the prototype and every enabled parameter. Disabled
    /// parameters receive zero.
    pub fn backward(
        &self,
        x: &LogMelSpectrogram,
        recon: &Reconstruction,
        params: &TransformParams,
        upstream: f64,
    ) -> Result<TransformGrads> {
        check_shapes(x, recon)?;
        let bins = self.bins();
        let frames = recon.frames();
        let en = params.enabled;
        let mut grads = TransformGrads::zeros(bins, frames);
        let scale = 2.0 * upstream / frames as f64;
        let mut d_out = vec![0.0; bins];
        let mut d_m = vec![0.0; bins];
        for t in 0..frames {
            for (f, d) in d_out.iter_mut().enumerate() {
                *d = scale * (recon.columns[t][f] - x.get(f, t));
            }
            if en.low {
                let low = params.low[t];
                let (mut ds, mut dc) = (0.0, 0.0);
                for (i, d) in d_out.iter().enumerate() {
                    let gap = low.cutoff - (i + 1) as f64;
                    if gap > 0.0 {
                        ds += d * gap;
                        dc += d * low.slope;
                    }
                }
                grads.low_slope[t] = ds;
                grads.low_cutoff[t] = dc;
            }
            if en.high {
                let high = params.high[t];
                let (mut ds, mut dc) = (0.0, 0.0);
                for (i, d) in d_out.iter().enumerate() {
                    let gap = (i + 1) as f64 - high.cutoff;
                    if gap > 0.0 {
                        ds += d * gap;
                        dc -= d * high.slope;
                    }
                }
                grads.high_slope[t] = ds;
                grads.high_cutoff[t] = dc;
            }
            if en.pitch {
                d_m.iter_mut().for_each(|v| *v = 0.0);
                let m = &recon.gained[t];
                let mut d_shift = 0.0;
                for (tap, &d) in recon.taps[t].iter().zip(&d_out) {
                    d_shift += tap.backward(m, self.fill, d, &mut d_m);
                }
                grads.shift[t] = d_shift;
            } else {
                d_m.copy_from_slice(&d_out);
            }
            if en.gain {
                grads.gain[t] = d_m.iter().sum();
            }
            for (p, d) in grads.prototype.iter_mut().zip(&d_m) {
                *p += d;
            }
        }
        Ok(grads)
    }
}

fn check_shapes(x: &LogMelSpectrogram, r: &Reconstruction) -> Result<()> {
    let bins = r.columns.first().map_or(0, Vec::len);
    if x.frames() != r.frames() || x.bins() != bins {
        return Err(Error::Contract(format!(
            "input is {}×{}, reconstruction {bins}×{}",
            x.bins(),
            x.frames(),
            r.frames()
        )));
    }
    Ok(())
}

/// Per-time-step squared ℓ2 distances between input and reconstruction.
pub fn per_timestep_errors(x: &LogMelSpectrogram, r: &Reconstruction) -> Result<Vec<f64>> {
    check_shapes(x, r)?;
    Ok(r.columns
        .iter()
        .enumerate()
        .map(|(t, col)| {
            col.iter()
                .enumerate()
                .map(|(f, v)| (x.get(f, t) - v).powi(2))
                .sum()
        })
        .collect())
}

/// Time-averaged squared ℓ2 distance (summed, not averaged, over bins).
pub fn reconstruction_error(x: &LogMelSpectrogram, r: &Reconstruction) -> Result<f64> {
    let per = per_timestep_errors(x, r)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis8() -> MelAxis {
        MelAxis::standard(8)
    }

    fn spec_from_columns(cols: &[Vec<f64>]) -> LogMelSpectrogram {
        let bins = cols[0].len();
        let frames = cols.len();
        let mut v = vec![0.0; bins * frames];
        for (t, c) in cols.iter().enumerate() {
            for (f, x) in c.iter().enumerate() {
                v[f * frames + t] = *x;
            }
        }
        LogMelSpectrogram::new(v, bins, frames, -1e9).unwrap()
    }

    #[test]
    fn mel_shift_values() {
        for f in [0.0, 10.0, 1234.5, 3000.0] {
            assert!((mel_shift(f, 1.0).unwrap() - f).abs() < 1e-9);
        }
        for s in [0.25, 0.5, 2.0, 4.0] {
            assert_eq!(mel_shift(0.0, s).unwrap(), 0.0);
        }
        // 2595·log10(1 + 2·9) = 2595·log10(19)
        let expected = 2595.0 * 19f64.log10();
        assert!((mel_shift(2595.0, 2.0).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 3318.36).abs() < 0.01);
        assert!(mel_shift(100.0, 0.0).is_err());
        assert!(mel_shift(100.0, -1.0).is_err());
    }

    #[test]
    fn gain_examples() {
        assert_eq!(apply_gain(&[-10.0, -20.0], 3.0), vec![-7.0, -17.0]);
        assert_eq!(apply_gain(&[-10.0, -20.0], 0.0), vec![-10.0, -20.0]);
    }

    #[test]
    fn pitch_identity_and_constants() {
        let axis = axis8();
        let m: Vec<f64> = (0..8).map(|i| -(i as f64) * 3.7 + 0.123).collect();
        assert_eq!(apply_pitch(&m, 1.0, &axis, -80.0), m);
        let c = vec![-12.5; 8];
        for s in [0.5, 0.8, 1.3, 2.0] {
            let out = apply_pitch(&c, s, &axis, -12.5);
            assert!(out.iter().all(|&v| v == -12.5));
        }
    }

    #[test]
    fn pitch_ramp_against_dense_oracle() {
        // independent route: work in Hz, shift frequencies, convert back
        let axis = axis8();
        let m: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let s = 1.5;
        let out = apply_pitch(&m, s, &axis, -80.0);
        for f in 0..8 {
            let hz = 700.0 * (10f64.powf(axis.center(f) / 2595.0) - 1.0) * s;
            let mel = 2595.0 * (1.0 + hz / 700.0).log10();
            let u = (mel - axis.first) / axis.step;
            let expected = if u < -1.0 || u > 8.0 {
                -80.0
            } else if u > 7.0 {
                // blend from the top bin toward fill one bin above it
                7.0 + (u - 7.0) * (-80.0 - 7.0)
            } else if u < 0.0 {
                -80.0 * -u
            } else {
                // linear ramp interpolates to its own coordinate
                u
            };
            assert!((out[f] - expected).abs() < 1e-9, "bin {f}: {} vs {expected}", out[f]);
        }
    }

    #[test]
    fn filter_examples() {
        let m = vec![0.0; 4];
        let out = apply_freq_filters(
            &m,
            Filter {
                slope: -2.0,
                cutoff: 3.0,
            },
            Filter {
                slope: 0.0,
                cutoff: 1.0,
            },
        );
        assert_eq!(out, vec![-4.0, -2.0, 0.0, 0.0]);
        let m = vec![1.0, 2.0, 3.0];
        assert_eq!(
            apply_freq_filters(&m, Filter { slope: 0.0, cutoff: 2.0 }, Filter { slope: 0.0, cutoff: 2.0 }),
            m
        );
    }

    #[test]
    fn filters_match_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Vec<f64> = (0..16).map(|_| rng.random_range(-60.0..0.0)).collect();
        let low = Filter {
            slope: rng.random_range(-2.0..2.0),
            cutoff: rng.random_range(1.0..16.0),
        };
        let high = Filter {
            slope: rng.random_range(-2.0..2.0),
            cutoff: rng.random_range(1.0..16.0),
        };
        let out = apply_freq_filters(&m, low, high);
        for f in 1..=16usize {
            let mut v = m[f - 1];
            if (f as f64) < low.cutoff {
                v += low.slope * (low.cutoff - f as f64);
            }
            if (f as f64) > high.cutoff {
                v += high.slope * (f as f64 - high.cutoff);
            }
            assert!((out[f - 1] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_disabled_and_gain_only() {
        let tr = SpectralTransforms::new(axis8(), -80.0);
        let p: Vec<f64> = (0..8).map(|i| -(i as f64) * 2.0).collect();
        let mut params = TransformParams::neutral(8, 4, EnabledMask::NONE);
        params.gain = vec![5.0, 1.0, 2.0, 3.0];
        params.shift = vec![1.7; 4];
        let r = tr.compose(&p, &params).unwrap();
        assert!(r.columns.iter().all(|c| c == &p));

        params.enabled = EnabledMask {
            gain: true,
            ..EnabledMask::NONE
        };
        params.gain = vec![0.0, 1.0, 2.0, 3.0];
        let r = tr.compose(&p, &params).unwrap();
        for t in 0..4 {
            assert_eq!(r.columns[t], apply_gain(&p, t as f64));
        }
    }

    #[test]
    fn compose_matches_sequential_ops() {
        let axis = axis8();
        let tr = SpectralTransforms::new(axis, -80.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(-60.0..-10.0)).collect();
        let mut params = TransformParams::neutral(8, 4, EnabledMask::ALL);
        for t in 0..4 {
            params.gain[t] = rng.random_range(-6.0..6.0);
            params.shift[t] = rng.random_range(0.6..1.6);
            params.low[t] = Filter {
                slope: rng.random_range(-1.0..1.0),
                cutoff: rng.random_range(1.0..8.0),
            };
            params.high[t] = Filter {
                slope: rng.random_range(-1.0..1.0),
                cutoff: rng.random_range(1.0..8.0),
            };
        }
        let r = tr.compose(&p, &params).unwrap();
        for t in 0..4 {
            let g = apply_gain(&p, params.gain[t]);
            let s = apply_pitch(&g, params.shift[t], &axis, -80.0);
            let expected = apply_freq_filters(&s, params.low[t], params.high[t]);
            for f in 0..8 {
                assert!((r.columns[t][f] - expected[f]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn error_examples() {
        let tr = SpectralTransforms::new(axis8(), -80.0);
        let p = vec![-5.0; 8];
        let params = TransformParams::neutral(8, 3, EnabledMask::NONE);
        let r = tr.compose(&p, &params).unwrap();
        let same = spec_from_columns(&r.columns);
        assert_eq!(reconstruction_error(&same, &r).unwrap(), 0.0);
        let plus: Vec<Vec<f64>> = r.columns.iter().map(|c| apply_gain(c, 1.0)).collect();
        assert_eq!(reconstruction_error(&spec_from_columns(&plus), &r).unwrap(), 8.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.random_range(-50.0..0.0)).collect())
            .collect();
        let x = spec_from_columns(&cols);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(-50.0..0.0)).collect();
        let r = tr.compose(&p, &TransformParams::neutral(8, 4, EnabledMask::NONE)).unwrap();
        let mut brute = 0.0;
        for t in 0..4 {
            for f in 0..8 {
                brute += (cols[t][f] - p[f]).powi(2);
            }
        }
        assert!((reconstruction_error(&x, &r).unwrap() - brute / 4.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let tr = SpectralTransforms::new(axis8(), -80.0);
        let r = tr
            .compose(&[0.0; 8], &TransformParams::neutral(8, 3, EnabledMask::NONE))
            .unwrap();
        let x = LogMelSpectrogram::filled(8, 2, 0.0, -80.0).unwrap();
        assert!(matches!(reconstruction_error(&x, &r), Err(Error::Contract(_))));
        assert!(tr
            .compose(&[0.0; 7], &TransformParams::neutral(8, 3, EnabledMask::NONE))
            .is_err());
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let tr = SpectralTransforms::new(axis8(), -80.0);
        let p: Vec<f64> = (0..8).map(|i| -(i as f64)).collect();
        let params = TransformParams::neutral(8, 4, EnabledMask::NONE);
        let r = tr.compose(&p, &params).unwrap();
        let x = spec_from_columns(&r.columns);
        let g = tr.backward(&x, &r, &params, 1.0).unwrap();
        assert!(g.prototype.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gain_gradient_closed_form() {
        let tr = SpectralTransforms::new(axis8(), -80.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(-40.0..0.0)).collect();
        let mut params = TransformParams::neutral(8, 4, EnabledMask { gain: true, ..EnabledMask::NONE });
        params.gain = vec![1.0, -2.0, 0.5, 3.0];
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..8).map(|_| rng.random_range(-40.0..0.0)).collect())
            .collect();
        let x = spec_from_columns(&cols);
        let r = tr.compose(&p, &params).unwrap();
        let g = tr.backward(&x, &r, &params, 1.0).unwrap();
        for t in 0..4 {
            let expected: f64 = (0..8).map(|f| r.columns[t][f] - cols[t][f]).sum::<f64>() * 2.0 / 4.0;
            assert!((g.gain[t] - expected).abs() < 1e-12);
        }
    }
}
