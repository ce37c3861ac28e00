//! The full model: `K` prototype columns, the transformation predictor, and
//! the inverse temperature β (stored as `ln β`). Also the `PROT` checkpoint
//! container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, LogMelSpectrogram, MelAxis};
use crate::nn::Tensor;
use crate::predictor::{Predictor, PredictorConfig, PredictorTrace};
use crate::transforms::{reconstruction_error, EnabledMask, Reconstruction, SpectralTransforms, TransformGrads, TransformParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PROT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer parameter groups; they differ in weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Network,
    Prototype,
    Temperature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub prototypes: usize,
    pub bins: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    pub slope_scale: f64,
    pub shift_scale: f64,
    pub leak: f64,
    pub floor_db: f64,
    /// Frequency range of the mel axis the pitch map works on.
    pub f_min: f64,
    pub f_max: f64,
    /// Analysis settings the spectrograms were computed with, kept so a
    /// checkpoint alone can turn prototypes back into audio.
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    /// Class names in index order; empty for unlabeled runs.
    pub labels: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prototypes: 8,
            bins: 64,
            enc_channels: vec![16, 32, 64],
            dec_channels: vec![32, 64, 128],
            enc_kernel: 3,
            dec_kernel: 3,
            slope_scale: 0.5,
            shift_scale: 0.05,
            leak: 0.1,
            floor_db: -80.0,
            f_min: 50.0,
            f_max: 11025.0,
            sample_rate: 22050,
            win: 1024,
            hop: 256,
            labels: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            bins: self.bins,
            prototypes: self.prototypes,
            enc_channels: self.enc_channels.clone(),
            dec_channels: self.dec_channels.clone(),
            enc_kernel: self.enc_kernel,
            dec_kernel: self.dec_kernel,
            slope_scale: self.slope_scale,
            shift_scale: self.shift_scale,
            leak: self.leak,
            input_center: self.floor_db / 2.0,
            input_scale: -self.floor_db / 2.0,
        }
    }

    pub fn axis(&self) -> Result<MelAxis> {
        MelAxis::new(self.f_min, self.f_max, self.bins)
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig {
            sample_rate: self.sample_rate,
            n_mels: self.bins,
            win: self.win,
            hop: self.hop,
            f_min: self.f_min,
            f_max: Some(self.f_max),
            floor_db: self.floor_db,
            ..FrontendConfig::default()
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("prototypes", self.prototypes);
        kv.set("bins", self.bins);
        kv.set_list("enc_channels", &self.enc_channels);
        kv.set_list("dec_channels", &self.dec_channels);
        kv.set("enc_kernel", self.enc_kernel);
        kv.set("dec_kernel", self.dec_kernel);
        kv.set("slope_scale", self.slope_scale);
        kv.set("shift_scale", self.shift_scale);
        kv.set("leak", self.leak);
        kv.set("floor_db", self.floor_db);
        kv.set("f_min", self.f_min);
        kv.set("f_max", self.f_max);
        kv.set("sample_rate", self.sample_rate);
        kv.set("win", self.win);
        kv.set("hop", self.hop);
        kv.set_list("labels", &self.labels);
        kv
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let need = |v: Option<Vec<usize>>, k: &str| v.ok_or_else(|| Error::Config(format!("missing key `{k}`")));
        let cfg = Self {
            prototypes: kv.take_or("prototypes", d.prototypes)?,
            bins: kv.take_or("bins", d.bins)?,
            enc_channels: need(kv.take_list("enc_channels")?.or(Some(d.enc_channels)), "enc_channels")?,
            dec_channels: need(kv.take_list("dec_channels")?.or(Some(d.dec_channels)), "dec_channels")?,
            enc_kernel: kv.take_or("enc_kernel", d.enc_kernel)?,
            dec_kernel: kv.take_or("dec_kernel", d.dec_kernel)?,
            slope_scale: kv.take_or("slope_scale", d.slope_scale)?,
            shift_scale: kv.take_or("shift_scale", d.shift_scale)?,
            leak: kv.take_or("leak", d.leak)?,
            floor_db: kv.take_or("floor_db", d.floor_db)?,
            f_min: kv.take_or("f_min", d.f_min)?,
            f_max: kv.take_or("f_max", d.f_max)?,
            sample_rate: kv.take_or("sample_rate", d.sample_rate)?,
            win: kv.take_or("win", d.win)?,
            hop: kv.take_or("hop", d.hop)?,
            labels: kv.take_list("labels")?.unwrap_or_default(),
        };
        kv.finish()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ProtoModel {
    pub config: ModelConfig,
    pub predictor: Predictor,
    /// `K × F`.
    pub prototypes: Tensor,
    /// One entry, `ln β`.
    pub beta_log: Tensor,
    transforms: SpectralTransforms,
}

/// Everything one sample's forward pass produces.
pub struct SampleForward {
    pub params: Vec<TransformParams>,
    pub recons: Vec<Reconstruction>,
    pub errors: Vec<f64>,
    trace: PredictorTrace,
}

impl ProtoModel {
    /// Prototypes start flat at half the floor; use `set_prototypes` or the
    /// trainer's initializer to set them from data.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let predictor = Predictor::new(config.predictor(), rng)?;
        let transforms = SpectralTransforms::new(config.axis()?, config.floor_db);
        let prototypes = Tensor::from_vec(
            &[config.prototypes, config.bins],
            vec![config.floor_db / 2.0; config.prototypes * config.bins],
        );
        Ok(Self {
            config,
            predictor,
            prototypes,
            beta_log: Tensor::zeros(&[1]),
            transforms,
        })
    }

    pub fn set_prototypes(&mut self, columns: &[Vec<f64>]) -> Result<()> {
        if columns.len() != self.k() || columns.iter().any(|c| c.len() != self.bins()) {
            return Err(Error::Contract(format!(
                "expected {} prototypes of {} bins",
                self.k(),
                self.bins()
            )));
        }
        self.prototypes.data = columns.concat();
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.config.prototypes
    }

    pub fn bins(&self) -> usize {
        self.config.bins
    }

    pub fn beta(&self) -> f64 {
        self.beta_log.data[0].exp()
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes.data[k * self.bins()..(k + 1) * self.bins()]
    }

    pub fn transforms(&self) -> &SpectralTransforms {
        &self.transforms
    }

    /// A same-shaped model with every parameter zero, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out: Vec<(String, ParamGroup, &Tensor)> = self
            .predictor
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, ParamGroup::Network, t))
            .collect();
        out.push(("prototypes".into(), ParamGroup::Prototype, &self.prototypes));
        out.push(("beta_log".into(), ParamGroup::Temperature, &self.beta_log));
        out
    }

    /// Mutable tensors in the order of `named_tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.predictor.tensors_mut();
        out.push(&mut self.prototypes);
        out.push(&mut self.beta_log);
        out
    }

    /// Trainable scalars, prototypes and β included.
    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ProtoModel) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.named_tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.2.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Predicts parameters for every prototype and reconstructs `x` with
    /// each. `x.frames()` must be a multiple of the predictor's divisor.
    pub fn forward(&self, x: &LogMelSpectrogram, mask: EnabledMask) -> Result<SampleForward> {
        let (params, trace) = self.predictor.forward(x, mask)?;
        let mut recons = Vec::with_capacity(self.k());
        let mut errors = Vec::with_capacity(self.k());
        for (k, p) in params.iter().enumerate() {
            let r = self.transforms.compose(self.prototype(k), p)?;
            errors.push(reconstruction_error(x, &r)?);
            recons.push(r);
        }
        Ok(SampleForward {
            params,
            recons,
            errors,
            trace,
        })
    }

    /// Reconstructions of a clip of any length: the predictor sees the clip
    /// right-padded to its divisor, and only the original frames are scored.
    pub fn forward_full_length(&self, x: &LogMelSpectrogram, mask: EnabledMask) -> Result<(Vec<f64>, Vec<Reconstruction>, Vec<TransformParams>)> {
        let div = self.predictor.config.divisor();
        let frames = x.frames();
        let padded = x.pad_to(frames.div_ceil(div) * div);
        let (params, _) = self.predictor.forward(&padded, mask)?;
        let mut errors = Vec::with_capacity(self.k());
        let mut recons = Vec::with_capacity(self.k());
        let mut kept = Vec::with_capacity(self.k());
        for (k, p) in params.into_iter().enumerate() {
            let p = p.truncated(frames);
            let r = self.transforms.compose(self.prototype(k), &p)?;
            errors.push(reconstruction_error(x, &r)?);
            recons.push(r);
            kept.push(p);
        }
        Ok((errors, recons, kept))
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to each prototype's reconstruction error is `d_errors[k]` and
    /// with respect to `ln β` is `d_beta_log`.
    pub fn backward(&self, x: &LogMelSpectrogram, fwd: &SampleForward, d_errors: &[f64], d_beta_log: f64, grad: &mut ProtoModel) -> Result<()> {
        if d_errors.len() != self.k() {
            return Err(Error::Contract(format!(
                "{} error cotangents for {} prototypes",
                d_errors.len(),
                self.k()
            )));
        }
        let bins = self.bins();
        let mut cotangents: Vec<Option<TransformGrads>> = vec![None; self.k()];
        for (k, &d) in d_errors.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let g = self.transforms.backward(x, &fwd.recons[k], &fwd.params[k], d)?;
            for (acc, v) in grad.prototypes.data[k * bins..(k + 1) * bins].iter_mut().zip(&g.prototype) {
                *acc += v;
            }
            cotangents[k] = Some(g);
        }
        grad.beta_log.data[0] += d_beta_log;
        self.predictor.backward(&fwd.trace, &cotangents, &mut grad.predictor)
    }

    pub fn write_checkpoint(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config.to_kv().to_text();
        out.write_all(&(text.len() as u32).to_le_bytes())?;
        out.write_all(text.as_bytes())?;
        let tensors = self.named_tensors();
        out.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, _, t) in tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(input: &mut impl Read) -> Result<Self> {
        let mut r = Reader(input);
        let mut magic = [0u8; 4];
        r.exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a PROT checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let text = r.string()?;
        let config = ModelConfig::from_kv(KeyValues::parse(&text)?)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        let count = r.u32()? as usize;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        if count != names.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {count} tensors, architecture has {}",
                names.len()
            )));
        }
        let mut slots = model.tensors_mut();
        for (expected, slot) in names.iter().zip(slots.iter_mut()) {
            let name = r.string()?;
            if &name != expected {
                return Err(Error::Version(format!("tensor `{name}` where `{expected}` was expected")));
            }
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if shape != slot.shape {
                return Err(Error::Version(format!(
                    "tensor `{name}` has shape {shape:?}, expected {:?}",
                    slot.shape
                )));
            }
            for v in slot.data.iter_mut() {
                *v = r.f32()? as f64;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0
            .read_exact(buf)
            .map_err(|_| Error::Format("truncated checkpoint".into()))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut b = vec![0u8; len];
        self.exact(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}
