//! Prototypes as sound: tiling a prototype column into a steady spectrogram,
//! rendering it to audio, and measuring how much of its shape survives a
//! trip through audio and back.

use crate::error::{Error, Result};
use crate::frontend::{invert_to_audio, LogMelSpectrogram, Waveform};
use crate::model::ProtoModel;

/// Prototype `k` repeated over `frames` columns.
pub fn prototype_spectrogram(model: &ProtoModel, k: usize, frames: usize) -> Result<LogMelSpectrogram> {
    if k >= model.k() {
        return Err(Error::Contract(format!("prototype {k} of {}", model.k())));
    }
    LogMelSpectrogram::tiled(model.prototype(k), frames, model.config.floor_db)
}

/// Steady tone of `seconds` whose log-mel spectrum is prototype `k`.
pub fn prototype_audio(model: &ProtoModel, k: usize, seconds: f64, griffin_lim_iters: usize) -> Result<Waveform> {
    let fe = model.config.frontend();
    let len = (seconds * fe.sample_rate as f64).round() as usize;
    if len == 0 {
        return Err(Error::Contract(format!("{seconds} s is shorter than one sample")));
    }
    // enough frames that the overlap-add covers `len` samples
    let frames = len.div_ceil(fe.hop) + fe.win / fe.hop;
    let spec = prototype_spectrogram(model, k, frames)?;
    let mut audio = invert_to_audio(&spec, &fe.filterbank()?, fe.hop, griffin_lim_iters)?;
    audio.samples.truncate(len);
    Ok(audio)
}

/// Pearson correlation between prototype `k` and the mean column of `audio`
/// re-analyzed with the model's front end, skipping frames that overlap the
/// clip edges.
pub fn round_trip_correlation(model: &ProtoModel, k: usize, audio: &Waveform) -> Result<f64> {
    let fe = model.config.frontend();
    let spec = fe.analyze(audio)?;
    let edge = fe.win / fe.hop;
    if spec.frames() <= 2 * edge {
        return Err(Error::Data(format!("{} frames is too short to skip {edge} at each edge", spec.frames())));
    }
    let interior = spec.slice_frames(edge, spec.frames() - 2 * edge);
    Ok(pearson(model.prototype(k), &interior.mean_column()))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_with(column: Vec<f64>) -> ProtoModel {
        let config = ModelConfig {
            prototypes: 1,
            bins: column.len(),
            enc_channels: vec![2],
            dec_channels: vec![2],
            ..ModelConfig::default()
        };
        let mut m = ProtoModel::new(config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.set_prototypes(&[column]).unwrap();
        m
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
    }

    #[test]
    fn smooth_prototype_survives_audio() {
        let column: Vec<f64> = (0..32)
            .map(|i| {
                let x = i as f64;
                -60.0 + 30.0 * (-(x - 8.0).powi(2) / 8.0).exp() + 20.0 * (-(x - 20.0).powi(2) / 12.0).exp()
            })
            .collect();
        let m = model_with(column);
        let audio = prototype_audio(&m, 0, 1.0, 32).unwrap();
        assert_eq!(audio.len(), 22050);
        assert!(audio.peak() > 0.5);
        let r = round_trip_correlation(&m, 0, &audio).unwrap();
        assert!(r > 0.9, "correlation {r}");
        assert!(prototype_audio(&m, 1, 1.0, 32).is_err());
    }
}
