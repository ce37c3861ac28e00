use std::f64::consts::PI;

/// Zero crossings of the sinc kernel kept on each side.
const ZERO_CROSSINGS: f64 = 32.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    if x.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (x + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}

/// Band-limited resampling with a Blackman-windowed sinc kernel. The cutoff
/// is the lower of the two Nyquist frequencies.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let cutoff = (to as f64 / from as f64).min(1.0);
    let half = ZERO_CROSSINGS / cutoff;
    let out_len = ((samples.len() as f64) / ratio).round().max(1.0) as usize;
    (0..out_len)
        .map(|n| {
            let center = n as f64 * ratio;
            let lo = (center - half).ceil().max(0.0) as usize;
            let hi = ((center + half).floor() as usize).min(samples.len() - 1);
            (lo..=hi)
                .map(|k| {
                    let d = center - k as f64;
                    samples[k] * cutoff * sinc(cutoff * d) * blackman(d / half)
                })
                .sum()
        })
        .collect()
}
