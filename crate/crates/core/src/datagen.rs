//! Synthetic ground truth: random smooth prototypes deformed by known
//! parameters, plus exhaustive and gradient-based single-column fitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Example, Manifest, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::frontend::{write_spec, LogMelSpectrogram, MelAxis};
use crate::optim::AdamMoments;
use crate::transforms::{
    reconstruction_error, EnabledMask, Filter, SpectralTransforms, TransformParams, SHIFT_MAX, SHIFT_MIN,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub bins: usize,
    pub frames: usize,
    pub gain_range: (f64, f64),
    pub shift_range: (f64, f64),
    /// Range of both filter slopes, dB per bin.
    pub slope_range: (f64, f64),
    /// `f64::INFINITY` for noiseless samples.
    pub noise_snr_db: f64,
    pub per_class: usize,
    pub seed: u64,
    pub floor_db: f64,
    /// Per-class gain ranges overriding `gain_range`.
    pub class_gain_ranges: Option<Vec<(f64, f64)>>,
    /// Every class deforms the same prototype.
    pub shared_prototype: bool,
    /// Moving-average window applied to each parameter track; a window of at
    /// least `frames` holds each track at one draw per sample.
    pub smoothing: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            bins: 32,
            frames: 16,
            gain_range: (-6.0, 6.0),
            shift_range: (0.8, 1.25),
            slope_range: (0.0, 0.0),
            noise_snr_db: 20.0,
            per_class: 100,
            seed: 0,
            floor_db: -80.0,
            class_gain_ranges: None,
            shared_prototype: false,
            smoothing: 5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 || self.frames == 0 || self.bins < 2 || self.smoothing == 0 {
            return Err(Error::Config("classes, per_class, frames, smoothing ≥ 1 and bins ≥ 2 required".into()));
        }
        let (lo, hi) = self.shift_range;
        if !(SHIFT_MIN..=SHIFT_MAX).contains(&lo) || !(SHIFT_MIN..=SHIFT_MAX).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "shift range [{lo}, {hi}] must lie in [{SHIFT_MIN}, {SHIFT_MAX}]"
            )));
        }
        let mut ranges = vec![self.gain_range, self.slope_range];
        if let Some(r) = &self.class_gain_ranges {
            if r.len() != self.classes {
                return Err(Error::Config("one gain range per class required".into()));
            }
            ranges.extend(r);
        }
        if ranges.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && a <= b)) {
            return Err(Error::Config("ranges must be finite with lo ≤ hi".into()));
        }
        if self.noise_snr_db.is_nan() {
            return Err(Error::Config("noise_snr_db is NaN".into()));
        }
        Ok(())
    }

    /// The axis the generator's pitch shifts work on (50 Hz to 11025 Hz).
    pub fn axis(&self) -> Result<MelAxis> {
        MelAxis::new(50.0, 11025.0, self.bins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub spec: LogMelSpectrogram,
    pub label: usize,
    pub params: TransformParams,
    /// Added to the clean reconstruction before clamping at the floor.
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub prototypes: Vec<Vec<f64>>,
    pub samples: Vec<SyntheticSample>,
    pub transforms: SpectralTransforms,
    pub floor_db: f64,
}

impl GroundTruth {
    /// Sample `i` rebuilt from its stored prototype, parameters and noise.
    pub fn regenerate(&self, i: usize) -> Result<LogMelSpectrogram> {
        let s = &self.samples[i];
        let r = self.transforms.compose(&self.prototypes[s.label], &s.params)?;
        let noisy: Vec<f64> = r.to_row_major().iter().zip(&s.noise).map(|(a, b)| a + b).collect();
        LogMelSpectrogram::clamped(noisy, self.transforms.bins(), r.frames(), self.floor_db)
    }

    /// `class_k`, zero-padded so lexical and numeric order agree.
    pub fn class_names(&self) -> Vec<String> {
        let k = self.prototypes.len();
        let width = (k.max(2) - 1).to_string().len();
        (0..k).map(|i| format!("class_{i:0width$}")).collect()
    }

    /// In-memory view of one split, using the same assignment as `write_dataset`.
    pub fn split(&self, seed: u64, want: Split) -> Result<Dataset> {
        let splits = split_indices(&self.samples.iter().map(|s| s.label).collect::<Vec<_>>(), seed);
        let examples = self
            .samples
            .iter()
            .enumerate()
            .zip(splits)
            .filter(|(_, split)| *split == want)
            .map(|((i, s), _)| Example {
                spec: s.spec.clone(),
                label: Some(s.label),
                path: format!("sample_{i:05}.spec").into(),
            })
            .collect();
        Dataset::new(examples, self.class_names())
    }

    /// Writes every sample as a `.spec` file plus `manifest.csv`, splitting
    /// each class 70/10/20 into train/val/test.
    pub fn write_dataset(&self, dir: &Path, seed: u64) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let splits = split_indices(&self.samples.iter().map(|s| s.label).collect::<Vec<_>>(), seed);
        let names = self.class_names();
        let mut rows = Vec::with_capacity(self.samples.len());
        for (i, (s, split)) in self.samples.iter().zip(splits).enumerate() {
            let name = format!("sample_{i:05}.spec");
            write_spec(&dir.join(&name), &s.spec)?;
            rows.push(ManifestRow {
                path: name,
                label: names[s.label].clone(),
                split,
            });
        }
        let manifest = Manifest {
            rows,
            root: dir.to_path_buf(),
        };
        manifest.write(&dir.join("manifest.csv"))?;
        Ok(manifest)
    }
}

/// Seeded per-class 70/10/20 split.
pub fn split_indices(labels: &[usize], seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Train; labels.len()];
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let train = (n * 7).div_ceil(10);
        let val = n / 10;
        for (j, &i) in members.iter().enumerate() {
            out[i] = if j < train {
                Split::Train
            } else if j < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

/// Smooth random spectrum: 20 dB above the floor plus 3 to 6 Gaussian
/// bumps, the tallest peak scaled down to at most 50 dB above that base.
pub fn random_prototype(bins: usize, floor_db: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut col = vec![0.0; bins];
    let bumps = rng.random_range(3..=6);
    let f = bins as f64;
    for _ in 0..bumps {
        let center = rng.random_range(0.0..f - 1.0);
        let width = rng.random_range((f / 16.0).max(1.0)..(f / 6.0).max(1.5));
        let amp = rng.random_range(10.0..40.0);
        for (i, v) in col.iter_mut().enumerate() {
            *v += amp * (-0.5 * ((i as f64 - center) / width).powi(2)).exp();
        }
    }
    let peak = col.iter().cloned().fold(0.0, f64::max);
    let scale = if peak > 50.0 { 50.0 / peak } else { 1.0 };
    col.iter().map(|v| floor_db + 20.0 + v * scale).collect()
}

fn smoothed_track(frames: usize, window: usize, mut draw: impl FnMut() -> f64) -> Vec<f64> {
    if window >= frames {
        return vec![draw(); frames];
    }
    let raw: Vec<f64> = (0..frames).map(|_| draw()).collect();
    let half = window / 2;
    (0..frames)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + window - half).min(frames);
            raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

pub fn gen_ground_truth(spec: &SyntheticSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let transforms = SpectralTransforms::new(spec.axis()?, spec.floor_db);
    let prototypes: Vec<Vec<f64>> = if spec.shared_prototype {
        vec![random_prototype(spec.bins, spec.floor_db, &mut rng); spec.classes]
    } else {
        (0..spec.classes)
            .map(|_| random_prototype(spec.bins, spec.floor_db, &mut rng))
            .collect()
    };
    let (f, t) = (spec.bins, spec.frames);
    let fb = f as f64;
    let low_cut = (1.0, 1.0 + (fb - 1.0) / 4.0);
    let high_cut = (1.0 + 3.0 * (fb - 1.0) / 4.0, fb);
    let ln_shift = (spec.shift_range.0.ln(), spec.shift_range.1.ln());
    let w = spec.smoothing;
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        let gain_range = spec.class_gain_ranges.as_ref().map_or(spec.gain_range, |r| r[label]);
        for _ in 0..spec.per_class {
            let gain = smoothed_track(t, w, || uniform(&mut rng, gain_range));
            let shift: Vec<f64> = smoothed_track(t, w, || uniform(&mut rng, ln_shift))
                .into_iter()
                .map(|v| v.exp().clamp(spec.shift_range.0, spec.shift_range.1))
                .collect();
            let low_slope = smoothed_track(t, w, || uniform(&mut rng, spec.slope_range));
            let low_cutoff = smoothed_track(t, w, || uniform(&mut rng, low_cut));
            let high_slope = smoothed_track(t, w, || uniform(&mut rng, spec.slope_range));
            let high_cutoff = smoothed_track(t, w, || uniform(&mut rng, high_cut));
            let params = TransformParams {
                gain,
                shift,
                low: low_slope
                    .iter()
                    .zip(&low_cutoff)
                    .map(|(&slope, &cutoff)| Filter { slope, cutoff })
                    .collect(),
                high: high_slope
                    .iter()
                    .zip(&high_cutoff)
                    .map(|(&slope, &cutoff)| Filter { slope, cutoff })
                    .collect(),
                enabled: EnabledMask::ALL,
            };
            let clean = transforms.compose(&prototypes[label], &params)?.to_row_major();
            let noise = if spec.noise_snr_db.is_infinite() {
                vec![0.0; f * t]
            } else {
                let mean = clean.iter().sum::<f64>() / clean.len() as f64;
                let var = clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / clean.len() as f64;
                let sigma = (var / 10f64.powf(spec.noise_snr_db / 10.0)).sqrt();
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                (0..f * t).map(|_| normal.sample(&mut rng)).collect()
            };
            let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
            let spec_out = LogMelSpectrogram::clamped(noisy, f, t, spec.floor_db)?;
            samples.push(SyntheticSample {
                spec: spec_out,
                label,
                params,
                noise,
            });
        }
    }
    Ok(GroundTruth {
        prototypes,
        samples,
        transforms,
        floor_db: spec.floor_db,
    })
}

/// Candidate values for each single-column parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FitGrid {
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
    pub low_slope: Vec<f64>,
    pub low_cutoff: Vec<f64>,
    pub high_slope: Vec<f64>,
    pub high_cutoff: Vec<f64>,
}

/// `lo, lo + step, …` up to `hi` inclusive (within rounding).
pub fn stepped(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

impl FitGrid {
    /// Gains ±12 dB by 0.25, ratios 0.5 to 2 by 0.02, slopes ±1 by 0.1,
    /// cutoffs at every bin.
    pub fn standard(bins: usize) -> Self {
        let cutoffs = stepped(1.0, bins as f64, 1.0);
        Self {
            gain: stepped(-12.0, 12.0, 0.25),
            shift: stepped(0.5, 2.0, 0.02),
            low_slope: stepped(-1.0, 1.0, 0.1),
            low_cutoff: cutoffs.clone(),
            high_slope: stepped(-1.0, 1.0, 0.1),
            high_cutoff: cutoffs,
        }
    }

    /// Combinations that are enumerated; the gain axis is solved in closed
    /// form per combination and does not count.
    pub fn enumerated(&self) -> u64 {
        [&self.shift, &self.low_slope, &self.low_cutoff, &self.high_slope, &self.high_cutoff]
            .iter()
            .map(|v| v.len() as u64)
            .product()
    }

    pub fn total(&self) -> u64 {
        self.enumerated() * self.gain.len() as u64
    }
}

pub const DEFAULT_FIT_BUDGET: u64 = 10_000_000;

fn params_from(g: f64, s: f64, low: Filter, high: Filter) -> TransformParams {
    TransformParams {
        gain: vec![g],
        shift: vec![s],
        low: vec![low],
        high: vec![high],
        enabled: EnabledMask::ALL,
    }
}

/// Global grid minimizer of the single-column reconstruction error. For
/// every (ratio, filters) combination the output is affine in the gain, with
/// a per-bin coefficient in [0, 1] set by how much of the read comes from the
/// prototype rather than the fill, so the error is a quadratic in the gain
/// and the best gain grid point is the one nearest its minimum.
pub fn brute_force_fit(x: &LogMelSpectrogram, prototype: &[f64], grid: &FitGrid, transforms: &SpectralTransforms, budget: u64) -> Result<(TransformParams, f64)> {
    let bins = transforms.bins();
    if x.frames() != 1 || x.bins() != bins || prototype.len() != bins {
        return Err(Error::Contract(format!(
            "need one {bins}-bin column and a {bins}-bin prototype"
        )));
    }
    if [&grid.gain, &grid.shift, &grid.low_slope, &grid.low_cutoff, &grid.high_slope, &grid.high_cutoff]
        .iter()
        .any(|v| v.is_empty())
    {
        return Err(Error::Contract("every grid axis needs at least one value".into()));
    }
    if grid.enumerated() > budget {
        return Err(Error::Budget {
            combinations: grid.enumerated(),
            budget,
        });
    }
    let mut gains = grid.gain.clone();
    gains.sort_by(f64::total_cmp);
    let target = x.column(0);
    let ramp = |slope: f64, cutoff: f64, low: bool| -> Vec<f64> {
        (0..bins)
            .map(|i| {
                let pos = (i + 1) as f64;
                slope * if low { (cutoff - pos).max(0.0) } else { (pos - cutoff).max(0.0) }
            })
            .collect()
    };
    let lows: Vec<(Filter, Vec<f64>)> = grid
        .low_slope
        .iter()
        .flat_map(|&a| grid.low_cutoff.iter().map(move |&c| (a, c)))
        .map(|(slope, cutoff)| (Filter { slope, cutoff }, ramp(slope, cutoff, true)))
        .collect();
    let highs: Vec<(Filter, Vec<f64>)> = grid
        .high_slope
        .iter()
        .flat_map(|&a| grid.high_cutoff.iter().map(move |&c| (a, c)))
        .map(|(slope, cutoff)| (Filter { slope, cutoff }, ramp(slope, cutoff, false)))
        .collect();
    let mut best: Option<(f64, f64, f64, Filter, Filter)> = None;
    let mut residual = vec![0.0; bins];
    for &s in &grid.shift {
        // the gain-free pitched column, and how much of a unit gain each bin carries
        let zero = transforms.compose(prototype, &params_from(0.0, s, Filter::neutral(bins), Filter::neutral(bins)))?;
        let probe = transforms.compose(prototype, &params_from(1.0, s, Filter::neutral(bins), Filter::neutral(bins)))?;
        let pitched = &zero.columns[0];
        let coef: Vec<f64> = probe.columns[0].iter().zip(pitched).map(|(a, b)| a - b).collect();
        let coef_sq: f64 = coef.iter().map(|c| c * c).sum();
        for (low, lv) in &lows {
            for (high, hv) in &highs {
                let mut dot = 0.0;
                for f in 0..bins {
                    residual[f] = target[f] - pitched[f] - lv[f] - hv[f];
                    dot += coef[f] * residual[f];
                }
                let g_star = if coef_sq == 0.0 { 0.0 } else { dot / coef_sq };
                let g = nearest(&gains, g_star);
                let err: f64 = (0..bins).map(|f| (residual[f] - coef[f] * g).powi(2)).sum();
                if best.is_none_or(|b| err < b.0) {
                    best = Some((err, g, s, *low, *high));
                }
            }
        }
    }
    let (_, g, s, low, high) = best.expect("non-empty grid");
    let params = params_from(g, s, low, high);
    let r = transforms.compose(prototype, &params)?;
    let err = reconstruction_error(x, &r)?;
    Ok((params, err))
}

fn nearest(sorted: &[f64], v: f64) -> f64 {
    let i = sorted.partition_point(|&g| g < v);
    match (i.checked_sub(1).map(|j| sorted[j]), sorted.get(i)) {
        (Some(a), Some(&b)) => {
            if v - a <= b - v {
                a
            } else {
                b
            }
        }
        (Some(a), None) => a,
        (None, Some(&b)) => b,
        (None, None) => unreachable!("empty gain grid"),
    }
}

/// Gradient fit from neutral parameters. With the ratio and cutoffs fixed
/// the output is linear in the gain and both slopes, so those three are
/// solved by least squares at every step and Adam moves only the log ratio
/// and the cutoffs. As in training, the first half of the steps fits gain
/// and ratio alone; the filters then join with their hinge smoothed into a
/// softplus whose width shrinks from one bin towards zero, so the cutoffs
/// are not trapped at the kinks between bins. Every iterate is scored with
/// the exact transforms and the best one is returned. Frames are fitted
/// independently.
pub fn gradient_fit(x: &LogMelSpectrogram, prototype: &[f64], transforms: &SpectralTransforms, steps: usize, lr: f64) -> Result<(TransformParams, f64)> {
    let bins = transforms.bins();
    let frames = x.frames();
    if x.bins() != bins || prototype.len() != bins {
        return Err(Error::Contract(format!("need {bins}-bin input and prototype")));
    }
    let mut params = TransformParams::neutral(bins, frames, EnabledMask::ALL);
    let mut theta: Vec<f64> = Vec::with_capacity(3 * frames);
    for t in 0..frames {
        theta.extend([params.shift[t].ln(), params.low[t].cutoff, params.high[t].cutoff]);
    }
    let mut adam = AdamMoments::new(theta.len());
    let mut best = (f64::INFINITY, params.clone());
    let (ln_lo, ln_hi) = (SHIFT_MIN.ln(), SHIFT_MAX.ln());
    let fb = bins as f64;
    let half = steps / 2;
    for step in 0..=steps {
        let width = (step >= half).then(|| {
            let progress = (step - half) as f64 / (steps - half).max(1) as f64;
            HINGE_WIDTH_START * (HINGE_WIDTH_END / HINGE_WIDTH_START).powf(progress)
        });
        for t in 0..frames {
            params.shift[t] = theta[3 * t].exp().clamp(SHIFT_MIN, SHIFT_MAX);
            params.low[t].cutoff = theta[3 * t + 1];
            params.high[t].cutoff = theta[3 * t + 2];
        }
        let mut exact = params.clone();
        solve_linear_parameters(x, prototype, transforms, &mut exact, width.map(|_| 0.0))?;
        let r = transforms.compose(prototype, &exact)?;
        let err = reconstruction_error(x, &r)?;
        if err < best.0 {
            best = (err, exact.clone());
        }
        if step == steps {
            break;
        }
        let mut smooth = r;
        smooth.columns = solve_linear_parameters(x, prototype, transforms, &mut params, width)?;
        let g = transforms.backward(x, &smooth, &params, 1.0)?;
        let mut grad = Vec::with_capacity(theta.len());
        for t in 0..frames {
            let (mut dl, mut dh) = (0.0, 0.0);
            if let Some(w) = width {
                let (low, high) = (params.low[t], params.high[t]);
                for f in 0..bins {
                    let d = 2.0 / frames as f64 * (smooth.columns[t][f] - x.get(f, t));
                    let pos = (f + 1) as f64;
                    dl += d * low.slope * hinge_slope(low.cutoff - pos, w);
                    dh -= d * high.slope * hinge_slope(pos - high.cutoff, w);
                }
            }
            grad.extend([g.shift[t] * params.shift[t], dl, dh]);
        }
        adam.update(&mut theta, &grad, lr, 0.0)?;
        for t in 0..frames {
            theta[3 * t] = theta[3 * t].clamp(ln_lo, ln_hi);
            theta[3 * t + 1] = theta[3 * t + 1].clamp(1.0, fb);
            theta[3 * t + 2] = theta[3 * t + 2].clamp(1.0, fb);
        }
    }
    Ok((best.1, best.0))
}

const HINGE_WIDTH_START: f64 = 1.0;
const HINGE_WIDTH_END: f64 = 1e-3;

/// `max(0, z)` for width 0, softplus of the given width otherwise.
fn hinge(z: f64, width: f64) -> f64 {
    if width == 0.0 {
        return z.max(0.0);
    }
    let u = z / width;
    width * (u.max(0.0) + (-u.abs()).exp().ln_1p())
}

fn hinge_slope(z: f64, width: f64) -> f64 {
    if width == 0.0 {
        return if z > 0.0 { 1.0 } else { 0.0 };
    }
    1.0 / (1.0 + (-z / width).exp())
}

/// Least-squares gain and slopes per frame for the ratio and cutoffs already
/// in `params`, with filter ramps of the given hinge width (slopes stay zero
/// when `None`). Returns the fitted columns. A tiny ridge keeps directions
/// with no support (a ramp that is zero everywhere) at zero.
fn solve_linear_parameters(
    x: &LogMelSpectrogram,
    prototype: &[f64],
    transforms: &SpectralTransforms,
    params: &mut TransformParams,
    width: Option<f64>,
) -> Result<Vec<Vec<f64>>> {
    let bins = transforms.bins();
    let frames = params.frames();
    let mut base = params.clone();
    for t in 0..frames {
        base.gain[t] = 0.0;
        base.low[t].slope = 0.0;
        base.high[t].slope = 0.0;
    }
    let zero = transforms.compose(prototype, &base)?;
    base.gain.iter_mut().for_each(|g| *g = 1.0);
    let unit = transforms.compose(prototype, &base)?;
    let mut fitted = Vec::with_capacity(frames);
    for t in 0..frames {
        let (low, high) = (params.low[t].cutoff, params.high[t].cutoff);
        let ramp = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            (1..=bins).map(|i| width.map_or(0.0, |w| hinge(f(i as f64), w))).collect()
        };
        let columns: [Vec<f64>; 3] = [
            unit.columns[t].iter().zip(&zero.columns[t]).map(|(a, b)| a - b).collect(),
            ramp(&|f| low - f),
            ramp(&|f| f - high),
        ];
        let target: Vec<f64> = (0..bins).map(|f| x.get(f, t) - zero.columns[t][f]).collect();
        let mut a = [[0.0; 3]; 3];
        let mut b = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = columns[i].iter().zip(&columns[j]).map(|(u, v)| u * v).sum();
            }
            a[i][i] += 1e-9;
            b[i] = columns[i].iter().zip(&target).map(|(u, v)| u * v).sum();
        }
        let coef = solve3(a, b);
        params.gain[t] = coef[0];
        params.low[t].slope = coef[1];
        params.high[t].slope = coef[2];
        fitted.push(
            (0..bins)
                .map(|f| zero.columns[t][f] + (0..3).map(|i| coef[i] * columns[i][f]).sum::<f64>())
                .collect(),
        );
    }
    Ok(fitted)
}

/// Gaussian elimination with partial pivoting on a symmetric positive
/// definite 3×3 system.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut out = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * out[k]).sum();
        out[row] = (b[row] - s) / a[row][row];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            bins: 16,
            frames: 8,
            per_class: 4,
            slope_range: (-0.5, 0.5),
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn neutral_noiseless_samples_tile_their_prototype() {
        let spec = SyntheticSpec {
            gain_range: (0.0, 0.0),
            shift_range: (1.0, 1.0),
            slope_range: (0.0, 0.0),
            noise_snr_db: f64::INFINITY,
            ..small_spec()
        };
        let gt = gen_ground_truth(&spec).unwrap();
        for s in &gt.samples {
            let tiled = LogMelSpectrogram::tiled(&gt.prototypes[s.label], spec.frames, spec.floor_db).unwrap();
            assert_eq!(s.spec, tiled);
        }
    }

    #[test]
    fn seeded_generation_is_bitwise_stable() {
        let a = gen_ground_truth(&small_spec()).unwrap();
        let b = gen_ground_truth(&small_spec()).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = gen_ground_truth(&SyntheticSpec {
            seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.samples[0].spec, c.samples[0].spec);
    }

    #[test]
    fn samples_regenerate_from_stored_parameters() {
        let gt = gen_ground_truth(&small_spec()).unwrap();
        for i in 0..gt.samples.len() {
            assert_eq!(gt.regenerate(i).unwrap(), gt.samples[i].spec);
        }
    }

    #[test]
    fn stored_ratios_respect_clamps() {
        let gt = gen_ground_truth(&SyntheticSpec {
            shift_range: (0.25, 4.0),
            ..small_spec()
        })
        .unwrap();
        for s in &gt.samples {
            assert!(s.params.shift.iter().all(|v| (SHIFT_MIN..=SHIFT_MAX).contains(v)));
        }
    }

    #[test]
    fn splits_are_seventy_ten_twenty() {
        let labels: Vec<usize> = (0..4).flat_map(|c| vec![c; 100]).collect();
        let splits = split_indices(&labels, 3);
        for c in 0..4 {
            let count = |s| (0..400).filter(|&i| labels[i] == c && splits[i] == s).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (70, 10, 20));
        }
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let gt = gen_ground_truth(&small_spec()).unwrap();
        gt.write_dataset(dir.path(), 0).unwrap();
        let m = Manifest::read(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(m.rows.len(), 12);
        let train = m.load(Split::Train, &Default::default()).unwrap();
        assert_eq!(train.classes, vec!["class_0", "class_1", "class_2"]);
        assert_eq!(train.bins(), Some(16));
        let mem = gt.split(0, Split::Train).unwrap();
        assert_eq!(train.labels(), mem.labels());
        for (a, b) in train.examples.iter().zip(&mem.examples) {
            assert_eq!(a.path, dir.path().join(&b.path));
        }
    }

    #[test]
    fn class_names_sort_numerically() {
        let gt = gen_ground_truth(&SyntheticSpec { classes: 12, per_class: 1, ..small_spec() }).unwrap();
        let names = gt.class_names();
        assert_eq!(names[2], "class_02");
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(sorted, names);
    }

    fn transforms(bins: usize) -> SpectralTransforms {
        SpectralTransforms::new(MelAxis::new(50.0, 11025.0, bins).unwrap(), -80.0)
    }

    fn proto8() -> Vec<f64> {
        vec![-50.0, -42.0, -30.0, -35.0, -45.0, -38.0, -52.0, -60.0]
    }

    fn small_grid() -> FitGrid {
        FitGrid {
            gain: stepped(-4.0, 4.0, 0.5),
            shift: stepped(0.8, 1.2, 0.1),
            low_slope: stepped(-0.5, 0.5, 0.5),
            low_cutoff: stepped(1.0, 8.0, 3.5),
            high_slope: stepped(-0.5, 0.5, 0.5),
            high_cutoff: stepped(1.0, 8.0, 3.5),
        }
    }

    #[test]
    fn identity_and_offset_are_found_exactly() {
        let tr = transforms(8);
        let p = proto8();
        let x = LogMelSpectrogram::tiled(&p, 1, -80.0).unwrap();
        let (params, err) = brute_force_fit(&x, &p, &small_grid(), &tr, DEFAULT_FIT_BUDGET).unwrap();
        assert_eq!(err, 0.0);
        assert_eq!((params.gain[0], params.shift[0]), (0.0, 1.0));

        let up: Vec<f64> = p.iter().map(|v| v + 3.0).collect();
        let x = LogMelSpectrogram::tiled(&up, 1, -80.0).unwrap();
        let (params, err) = brute_force_fit(&x, &p, &small_grid(), &tr, DEFAULT_FIT_BUDGET).unwrap();
        assert_eq!(params.gain[0], 3.0);
        assert!(err < 1e-20);
    }

    #[test]
    fn closed_form_gain_matches_full_enumeration() {
        let tr = transforms(8);
        let p = proto8();
        let grid = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let col: Vec<f64> = p.iter().map(|v| v + rng.random_range(-6.0..6.0)).collect();
            let x = LogMelSpectrogram::tiled(&col, 1, -80.0).unwrap();
            let (_, fast) = brute_force_fit(&x, &p, &grid, &tr, DEFAULT_FIT_BUDGET).unwrap();
            let mut naive = f64::INFINITY;
            for &g in &grid.gain {
                for &s in &grid.shift {
                    for &a in &grid.low_slope {
                        for &c in &grid.low_cutoff {
                            for &b in &grid.high_slope {
                                for &d in &grid.high_cutoff {
                                    let params = params_from(
                                        g,
                                        s,
                                        Filter { slope: a, cutoff: c },
                                        Filter { slope: b, cutoff: d },
                                    );
                                    let r = tr.compose(&p, &params).unwrap();
                                    naive = naive.min(reconstruction_error(&x, &r).unwrap());
                                }
                            }
                        }
                    }
                }
            }
            assert!((fast - naive).abs() <= 1e-9 * naive.max(1.0), "{fast} vs {naive}");
        }
    }

    #[test]
    fn oversized_grid_hits_budget() {
        let tr = transforms(8);
        let p = proto8();
        let x = LogMelSpectrogram::tiled(&p, 1, -80.0).unwrap();
        let grid = FitGrid::standard(8);
        assert!(matches!(
            brute_force_fit(&x, &p, &grid, &tr, 1_000_000),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn gradient_fit_recovers_gain_and_ratio() {
        let tr = transforms(8);
        let p = proto8();
        let truth = params_from(2.5, 1.05, Filter::neutral(8), Filter::neutral(8));
        let r = tr.compose(&p, &truth).unwrap();
        let x = LogMelSpectrogram::clamped(r.to_row_major(), 8, 1, -80.0).unwrap();
        let (_, err) = gradient_fit(&x, &p, &tr, 500, 1e-2).unwrap();
        let (_, grid_err) = brute_force_fit(&x, &p, &small_grid(), &tr, DEFAULT_FIT_BUDGET).unwrap();
        assert!(err <= grid_err + 1e-3, "{err} vs {grid_err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn refining_a_grid_never_hurts(offsets in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let tr = transforms(8);
            let p = proto8();
            let col: Vec<f64> = p.iter().zip(&offsets).map(|(a, b)| a + b).collect();
            let x = LogMelSpectrogram::tiled(&col, 1, -80.0).unwrap();
            let coarse = small_grid();
            let mut fine = coarse.clone();
            fine.gain = stepped(-4.0, 4.0, 0.25);
            fine.shift = stepped(0.8, 1.2, 0.05);
            fine.low_cutoff = stepped(1.0, 8.0, 0.5);
            let (_, a) = brute_force_fit(&x, &p, &coarse, &tr, DEFAULT_FIT_BUDGET).unwrap();
            let (_, b) = brute_force_fit(&x, &p, &fine, &tr, DEFAULT_FIT_BUDGET).unwrap();
            prop_assert!(b <= a + 1e-9);
        }
    }
}
