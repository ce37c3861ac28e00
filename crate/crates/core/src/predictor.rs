//! Amortized transformation predictor: a shared 2-D convolutional encoder
//! whose per-level maps are collapsed over frequency, followed by one 1-D
//! temporal decoder per transformation with skip connections, each ending
//! in a head that emits parameters for all `K` prototypes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::LogMelSpectrogram;
use crate::nn::{self, Conv1d, Conv2d, Tensor};
use crate::transforms::{EnabledMask, Filter, TransformGrads, TransformParams, SHIFT_MAX, SHIFT_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Gain,
    Pitch,
    Low,
    High,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [Self::Gain, Self::Pitch, Self::Low, Self::High];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gain => "gain",
            Self::Pitch => "pitch",
            Self::Low => "low",
            Self::High => "high",
        }
    }

    /// Head output channels per prototype.
    fn channels_per_prototype(self) -> usize {
        match self {
            Self::Gain | Self::Pitch => 1,
            Self::Low | Self::High => 2,
        }
    }

    fn enabled(self, mask: EnabledMask) -> bool {
        match self {
            Self::Gain => mask.gain,
            Self::Pitch => mask.pitch,
            Self::Low => mask.low,
            Self::High => mask.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    pub bins: usize,
    pub prototypes: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    /// dB per bin per unit of raw slope output.
    pub slope_scale: f64,
    /// Natural-log pitch ratio per unit of raw ratio output.
    pub shift_scale: f64,
    pub leak: f64,
    /// Inputs are fed to the encoder as `(x − center) / scale`.
    pub input_center: f64,
    pub input_scale: f64,
}

impl PredictorConfig {
    pub fn levels(&self) -> usize {
        self.enc_channels.len()
    }

    /// Required divisor of both spectrogram dimensions.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.is_empty() || self.enc_channels.len() != self.dec_channels.len() {
            return Err(Error::Config(
                "enc_channels and dec_channels must be nonempty and of equal length".into(),
            ));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.enc_kernel % 2 == 0 || self.dec_kernel % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.prototypes == 0 {
            return Err(Error::Config("need at least one prototype".into()));
        }
        if self.bins % self.divisor() != 0 {
            return Err(Error::Config(format!(
                "{} mel bins not divisible by {} ({} levels)",
                self.bins,
                self.divisor(),
                self.levels()
            )));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::Config("input_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// `convs[r]` runs at temporal resolution `T/2^r`.
    pub convs: Vec<Conv1d>,
    pub head: Conv1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub encoder: Vec<Conv2d>,
    /// Frequency-pooling logits per level, `[C_r][F/2^r]`.
    pub collapse: Vec<Tensor>,
    /// Indexed like `TransformKind::ALL`.
    pub decoders: Vec<Decoder>,
}

struct EncoderLevel {
    conv_in: Vec<f64>,
    pool_idx: Vec<usize>,
    pre: Vec<f64>,
    z: Vec<f64>,
    pool_weights: Vec<f64>,
}

struct DecoderTrace {
    ins: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    head_in: Vec<f64>,
    raw: Vec<f64>,
}

/// Forward intermediates needed by `Predictor::backward`.
pub struct PredictorTrace {
    frames: usize,
    mask: EnabledMask,
    levels: Vec<EncoderLevel>,
    collapsed: Vec<Vec<f64>>,
    decoders: Vec<Option<DecoderTrace>>,
}

impl PredictorTrace {
    /// Frequency-collapsed encoder features, one `C_r × T/2^r` map per level.
    pub fn collapsed(&self) -> &[Vec<f64>] {
        &self.collapsed
    }

    /// Full-resolution encoder maps, `C_r × F/2^r × T/2^r`.
    pub fn feature_maps(&self) -> Vec<&[f64]> {
        self.levels.iter().map(|l| l.z.as_slice()).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Predictor {
    /// Random trunk weights; every head starts at zero so its transformation
    /// is the identity until trained.
    pub fn new(config: PredictorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let levels = config.levels();
        let mut encoder = Vec::with_capacity(levels);
        let mut collapse = Vec::with_capacity(levels);
        let mut c_prev = 1;
        for (r, &c) in config.enc_channels.iter().enumerate() {
            encoder.push(Conv2d::new(c_prev, c, config.enc_kernel, rng));
            collapse.push(Tensor::zeros(&[c, config.bins >> r]));
            c_prev = c;
        }
        let decoders = TransformKind::ALL
            .iter()
            .map(|&kind| {
                let convs = (0..levels)
                    .map(|r| {
                        let c_in = if r == levels - 1 {
                            config.enc_channels[r]
                        } else {
                            config.dec_channels[r + 1] + config.enc_channels[r]
                        };
                        Conv1d::new(c_in, config.dec_channels[r], config.dec_kernel, rng)
                    })
                    .collect();
                let head = Conv1d::zeroed(
                    config.dec_channels[0],
                    kind.channels_per_prototype() * config.prototypes,
                    1,
                );
                Decoder { convs, head }
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            collapse,
            decoders,
        })
    }

    /// Same architecture with every weight zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (r, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{r}.weight"), &c.weight));
            out.push((format!("encoder.{r}.bias"), &c.bias));
        }
        for (r, t) in self.collapse.iter().enumerate() {
            out.push((format!("collapse.{r}"), t));
        }
        for (kind, d) in TransformKind::ALL.iter().zip(&self.decoders) {
            for (r, c) in d.convs.iter().enumerate() {
                out.push((format!("decoder.{}.{r}.weight", kind.name()), &c.weight));
                out.push((format!("decoder.{}.{r}.bias", kind.name()), &c.bias));
            }
            out.push((format!("head.{}.weight", kind.name()), &d.head.weight));
            out.push((format!("head.{}.bias", kind.name()), &d.head.bias));
        }
        out
    }

    /// Mutable tensors in the order of `named_tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.encoder {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.extend(self.collapse.iter_mut());
        for d in &mut self.decoders {
            for c in &mut d.convs {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            out.push(&mut d.head.weight);
            out.push(&mut d.head.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, x: &LogMelSpectrogram) -> Result<()> {
        let div = self.config.divisor();
        if x.bins() != self.config.bins {
            return Err(Error::Contract(format!(
                "input has {} mel bins, model expects {}",
                x.bins(),
                self.config.bins
            )));
        }
        if x.frames() % div != 0 {
            return Err(Error::Contract(format!(
                "{} frames not divisible by {div}; pad the input first",
                x.frames()
            )));
        }
        Ok(())
    }

    /// Per-prototype parameters for every frame of `x`. Transformations that
    /// `mask` disables come out neutral and their decoders are not evaluated.
    pub fn forward(&self, x: &LogMelSpectrogram, mask: EnabledMask) -> Result<(Vec<TransformParams>, PredictorTrace)> {
        self.check_input(x)?;
        let cfg = &self.config;
        let frames = x.frames();
        let leak = cfg.leak;

        let mut levels: Vec<EncoderLevel> = Vec::with_capacity(cfg.levels());
        let mut collapsed = Vec::with_capacity(cfg.levels());
        let input: Vec<f64> = x
            .values()
            .iter()
            .map(|v| (v - cfg.input_center) / cfg.input_scale)
            .collect();
        for (r, conv) in self.encoder.iter().enumerate() {
            let (h, w) = (cfg.bins >> r, frames >> r);
            let (conv_in, pool_idx) = match levels.last() {
                None => (input.clone(), Vec::new()),
                Some(prev) => nn::max_pool2(&prev.z, cfg.enc_channels[r - 1], h * 2, w * 2),
            };
            let pre = conv.forward(&conv_in, h, w);
            let mut z = pre.clone();
            nn::leaky_relu(&mut z, leak);
            let (zc, pool_weights) = nn::softmax_pool(&z, &self.collapse[r], cfg.enc_channels[r], h, w);
            collapsed.push(zc);
            levels.push(EncoderLevel {
                conv_in,
                pool_idx,
                pre,
                z,
                pool_weights,
            });
        }

        let top = cfg.levels() - 1;
        let decoders: Vec<Option<DecoderTrace>> = TransformKind::ALL
            .iter()
            .zip(&self.decoders)
            .map(|(&kind, dec)| {
                if !kind.enabled(mask) {
                    return None;
                }
                let mut ins = vec![Vec::new(); cfg.levels()];
                let mut pres = vec![Vec::new(); cfg.levels()];
                let mut h: Vec<f64> = Vec::new();
                for r in (0..=top).rev() {
                    let t_r = frames >> r;
                    let input = if r == top {
                        collapsed[r].clone()
                    } else {
                        let mut up = nn::unpool2(&h, cfg.dec_channels[r + 1], t_r / 2);
                        up.extend_from_slice(&collapsed[r]);
                        up
                    };
                    let pre = dec.convs[r].forward(&input, t_r);
                    h = pre.clone();
                    nn::leaky_relu(&mut h, leak);
                    ins[r] = input;
                    pres[r] = pre;
                }
                let raw = dec.head.forward(&h, frames);
                Some(DecoderTrace {
                    ins,
                    pres,
                    head_in: h,
                    raw,
                })
            })
            .collect();

        let params = self.map_outputs(&decoders, frames, mask);
        Ok((
            params,
            PredictorTrace {
                frames,
                mask,
                levels,
                collapsed,
                decoders,
            },
        ))
    }

    fn map_outputs(&self, decoders: &[Option<DecoderTrace>], frames: usize, mask: EnabledMask) -> Vec<TransformParams> {
        let k_total = self.config.prototypes;
        let bins = self.config.bins;
        let (lo, hi) = (SHIFT_MIN.ln(), SHIFT_MAX.ln());
        let raw = |kind: TransformKind, ch: usize, t: usize| -> f64 {
            decoders[kind as usize].as_ref().expect("enabled decoder").raw[ch * frames + t]
        };
        (0..k_total)
            .map(|k| {
                let mut p = TransformParams::neutral(bins, frames, mask);
                for t in 0..frames {
                    if mask.gain {
                        p.gain[t] = raw(TransformKind::Gain, k, t);
                    }
                    if mask.pitch {
                        p.shift[t] = (self.config.shift_scale * raw(TransformKind::Pitch, k, t)).clamp(lo, hi).exp();
                    }
                    if mask.low {
                        p.low[t] = self.filter(raw(TransformKind::Low, k, t), raw(TransformKind::Low, k_total + k, t));
                    }
                    if mask.high {
                        p.high[t] = self.filter(raw(TransformKind::High, k, t), raw(TransformKind::High, k_total + k, t));
                    }
                }
                p
            })
            .collect()
    }

    fn filter(&self, raw_slope: f64, raw_cutoff: f64) -> Filter {
        Filter {
            slope: raw_slope * self.config.slope_scale,
            cutoff: 1.0 + (self.config.bins as f64 - 1.0) * sigmoid(raw_cutoff),
        }
    }

    /// Back-propagates per-prototype parameter cotangents (the `prototype`
    /// field of each `TransformGrads` is ignored) into `grad`.
    pub fn backward(&self, trace: &PredictorTrace, cotangents: &[Option<TransformGrads>], grad: &mut Predictor) -> Result<()> {
        let cfg = &self.config;
        let k_total = cfg.prototypes;
        if cotangents.len() != k_total {
            return Err(Error::Contract(format!(
                "{} cotangent slots for {k_total} prototypes",
                cotangents.len()
            )));
        }
        let frames = trace.frames;
        let (lo, hi) = (SHIFT_MIN.ln(), SHIFT_MAX.ln());
        let levels = cfg.levels();
        let mut d_collapsed: Vec<Vec<f64>> = trace.collapsed.iter().map(|c| vec![0.0; c.len()]).collect();
        let mut any = false;

        for (j, &kind) in TransformKind::ALL.iter().enumerate() {
            let Some(dt) = trace.decoders[j].as_ref() else {
                continue;
            };
            if !kind.enabled(trace.mask) {
                continue;
            }
            let per = kind.channels_per_prototype();
            let mut d_raw = vec![0.0; per * k_total * frames];
            let mut nonzero = false;
            for (k, cot) in cotangents.iter().enumerate() {
                let Some(g) = cot else { continue };
                for t in 0..frames {
                    let at = |ch: usize| dt.raw[ch * frames + t];
                    match kind {
                        TransformKind::Gain => d_raw[k * frames + t] = g.gain[t],
                        TransformKind::Pitch => {
                            let r = cfg.shift_scale * at(k);
                            if (lo..=hi).contains(&r) {
                                d_raw[k * frames + t] = g.shift[t] * r.exp() * cfg.shift_scale;
                            }
                        }
                        TransformKind::Low | TransformKind::High => {
                            let (ds, dc) = if kind == TransformKind::Low {
                                (g.low_slope[t], g.low_cutoff[t])
                            } else {
                                (g.high_slope[t], g.high_cutoff[t])
                            };
                            d_raw[k * frames + t] = ds * cfg.slope_scale;
                            let sg = sigmoid(at(k_total + k));
                            d_raw[(k_total + k) * frames + t] = dc * (cfg.bins as f64 - 1.0) * sg * (1.0 - sg);
                        }
                    }
                }
                nonzero = true;
            }
            if !nonzero {
                continue;
            }
            any = true;
            let dec = &self.decoders[j];
            let gdec = &mut grad.decoders[j];
            let mut dh = dec.head.backward(&dt.head_in, &d_raw, frames, &mut gdec.head);
            for r in 0..levels {
                let t_r = frames >> r;
                nn::leaky_relu_backward(&dt.pres[r], &mut dh, cfg.leak);
                let d_in = dec.convs[r].backward(&dt.ins[r], &dh, t_r, &mut gdec.convs[r]);
                if r == levels - 1 {
                    for (a, b) in d_collapsed[r].iter_mut().zip(&d_in) {
                        *a += b;
                    }
                } else {
                    let split = cfg.dec_channels[r + 1] * t_r;
                    for (a, b) in d_collapsed[r].iter_mut().zip(&d_in[split..]) {
                        *a += b;
                    }
                    dh = nn::unpool2_backward(&d_in[..split], cfg.dec_channels[r + 1], t_r / 2);
                }
            }
        }
        if !any {
            return Ok(());
        }

        let mut d_z: Option<Vec<f64>> = None;
        for r in (0..levels).rev() {
            let (h, w) = (cfg.bins >> r, frames >> r);
            let c = cfg.enc_channels[r];
            let lvl = &trace.levels[r];
            let mut dz = nn::softmax_pool_backward(
                &lvl.z,
                &lvl.pool_weights,
                &d_collapsed[r],
                c,
                h,
                w,
                &mut grad.collapse[r],
            );
            if let Some(from_above) = d_z.take() {
                for (a, b) in dz.iter_mut().zip(&from_above) {
                    *a += b;
                }
            }
            nn::leaky_relu_backward(&lvl.pre, &mut dz, cfg.leak);
            let d_in = self.encoder[r].backward(&lvl.conv_in, &dz, h, w, &mut grad.encoder[r]);
            if r > 0 {
                let prev_len = cfg.enc_channels[r - 1] * (h * 2) * (w * 2);
                d_z = Some(nn::max_pool2_backward(&d_in, &lvl.pool_idx, prev_len));
            }
        }
        Ok(())
    }
}
