//! Curriculum training: transformations are switched on one at a time, each
//! time the training loss stops improving.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{error_rows, majority_map, report_from_rows, EvalMode, EvalReport};
use crate::frontend::{tile_or_crop, FrontendConfig, LogMelSpectrogram};
use crate::model::{ModelConfig, ProtoModel};
use crate::objectives::{classify, prediction_loss, prediction_loss_grad};
use crate::optim::{Adam, OptimizerConfig};
use crate::transforms::EnabledMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[serde(rename = "unsup")]
    Unsupervised,
    #[serde(rename = "sup")]
    Supervised,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsup" => Ok(Self::Unsupervised),
            "sup" => Ok(Self::Supervised),
            other => Err(Error::Config(format!("unknown mode `{other}` (unsup, sup)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unsupervised => "unsup",
            Self::Supervised => "sup",
        })
    }
}

impl TrainMode {
    pub fn eval_mode(self) -> EvalMode {
        match self {
            Self::Unsupervised => EvalMode::Clustering,
            Self::Supervised => EvalMode::Supervised,
        }
    }

    /// Highest curriculum stage the mode can reach.
    pub fn last_stage(self) -> CurriculumStage {
        match self {
            Self::Unsupervised => CurriculumStage::FILTERS,
            Self::Supervised => CurriculumStage::CROSS_ENTROPY,
        }
    }
}

/// 0 raw prototypes, 1 +gain, 2 +pitch, 3 +low/high filters, 4 +cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CurriculumStage(pub u8);

impl CurriculumStage {
    pub const RAW: Self = Self(0);
    pub const GAIN: Self = Self(1);
    pub const PITCH: Self = Self(2);
    pub const FILTERS: Self = Self(3);
    pub const CROSS_ENTROPY: Self = Self(4);

    pub fn mask(self) -> EnabledMask {
        EnabledMask {
            gain: self.0 >= 1,
            pitch: self.0 >= 2,
            low: self.0 >= 3,
            high: self.0 >= 3,
        }
    }

    pub fn cross_entropy(self) -> bool {
        self.0 >= 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    SampleMeanNoise,
    RandomFrames,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample-mean+noise" => Ok(Self::SampleMeanNoise),
            "random-frames" => Ok(Self::RandomFrames),
            other => Err(Error::Config(format!(
                "unknown init `{other}` (sample-mean+noise, random-frames)"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SampleMeanNoise => "sample-mean+noise",
            Self::RandomFrames => "random-frames",
        })
    }
}

/// Everything a training run reads from its config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub prototypes: usize,
    pub frontend: FrontendConfig,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    pub slope_scale: f64,
    pub shift_scale: f64,
    pub leak: f64,
    pub optimizer: OptimizerConfig,
    /// Training crop width; must be a multiple of the predictor's divisor.
    pub crop_frames: usize,
    pub lambda_ce: f64,
    pub reinit_threshold: f64,
    pub init: InitMode,
    /// Initialization noise as a fraction of the mean spectrum's range.
    pub init_noise: f64,
    /// Curriculum ceiling; `None` means the mode's last stage.
    pub max_stage: Option<u8>,
    pub seed: u64,
    pub workers: usize,
    /// Write a checkpoint every this many epochs (0: only at stage changes and the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            mode: TrainMode::Unsupervised,
            prototypes: m.prototypes,
            frontend: FrontendConfig::default(),
            enc_channels: m.enc_channels,
            dec_channels: m.dec_channels,
            enc_kernel: m.enc_kernel,
            dec_kernel: m.dec_kernel,
            slope_scale: m.slope_scale,
            shift_scale: m.shift_scale,
            leak: m.leak,
            optimizer: OptimizerConfig::default(),
            crop_frames: 128,
            lambda_ce: 0.01,
            reinit_threshold: 0.2,
            init: InitMode::SampleMeanNoise,
            init_noise: 0.05,
            max_stage: None,
            seed: 0,
            workers: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let d = Self::default();
        let fe = &d.frontend;
        let op = &d.optimizer;
        let cfg = Self {
            mode: kv.take_or("mode", d.mode)?,
            prototypes: kv.take_or("prototypes", d.prototypes)?,
            frontend: FrontendConfig {
                sample_rate: kv.take_or("sample_rate", fe.sample_rate)?,
                n_mels: kv.take_or("n_mels", fe.n_mels)?,
                win: kv.take_or("win", fe.win)?,
                hop: kv.take_or("hop", fe.hop)?,
                f_min: kv.take_or("f_min", fe.f_min)?,
                f_max: kv.take("f_max")?.or(fe.f_max),
                floor_db: kv.take_or("floor_db", fe.floor_db)?,
                griffin_lim_iters: kv.take_or("griffin_lim_iters", fe.griffin_lim_iters)?,
            },
            enc_channels: kv.take_list("enc_channels")?.unwrap_or(d.enc_channels),
            dec_channels: kv.take_list("dec_channels")?.unwrap_or(d.dec_channels),
            enc_kernel: kv.take_or("enc_kernel", d.enc_kernel)?,
            dec_kernel: kv.take_or("dec_kernel", d.dec_kernel)?,
            slope_scale: kv.take_or("slope_scale", d.slope_scale)?,
            shift_scale: kv.take_or("shift_scale", d.shift_scale)?,
            leak: kv.take_or("leak", d.leak)?,
            optimizer: OptimizerConfig {
                learning_rate: kv.take_or("learning_rate", op.learning_rate)?,
                prototype_learning_rate: kv.take("prototype_learning_rate")?,
                temperature_learning_rate: kv.take("temperature_learning_rate")?,
                weight_decay_networks: kv.take_or("weight_decay_networks", op.weight_decay_networks)?,
                weight_decay_prototypes: kv.take_or("weight_decay_prototypes", op.weight_decay_prototypes)?,
                batch_size: kv.take_or("batch_size", op.batch_size)?,
                max_epochs: kv.take_or("max_epochs", op.max_epochs)?,
                plateau_patience: kv.take_or("plateau_patience", op.plateau_patience)?,
                plateau_epsilon: kv.take_or("plateau_epsilon", op.plateau_epsilon)?,
            },
            crop_frames: kv.take_or("crop_frames", d.crop_frames)?,
            lambda_ce: kv.take_or("lambda_ce", d.lambda_ce)?,
            reinit_threshold: kv.take_or("reinit_threshold", d.reinit_threshold)?,
            init: kv.take_or("init", d.init)?,
            init_noise: kv.take_or("init_noise", d.init_noise)?,
            max_stage: kv.take("max_stage")?,
            seed: kv.take_or("seed", d.seed)?,
            workers: kv.take_or("workers", d.workers)?,
            checkpoint_every: kv.take_or("checkpoint_every", d.checkpoint_every)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let fe = &self.frontend;
        let op = &self.optimizer;
        kv.set("mode", self.mode);
        kv.set("prototypes", self.prototypes);
        kv.set("sample_rate", fe.sample_rate);
        kv.set("n_mels", fe.n_mels);
        kv.set("win", fe.win);
        kv.set("hop", fe.hop);
        kv.set("f_min", fe.f_min);
        kv.set("f_max", fe.f_max_hz());
        kv.set("floor_db", fe.floor_db);
        kv.set("griffin_lim_iters", fe.griffin_lim_iters);
        kv.set_list("enc_channels", &self.enc_channels);
        kv.set_list("dec_channels", &self.dec_channels);
        kv.set("enc_kernel", self.enc_kernel);
        kv.set("dec_kernel", self.dec_kernel);
        kv.set("slope_scale", self.slope_scale);
        kv.set("shift_scale", self.shift_scale);
        kv.set("leak", self.leak);
        kv.set("learning_rate", op.learning_rate);
        if let Some(lr) = op.prototype_learning_rate {
            kv.set("prototype_learning_rate", lr);
        }
        if let Some(lr) = op.temperature_learning_rate {
            kv.set("temperature_learning_rate", lr);
        }
        kv.set("weight_decay_networks", op.weight_decay_networks);
        kv.set("weight_decay_prototypes", op.weight_decay_prototypes);
        kv.set("batch_size", op.batch_size);
        kv.set("max_epochs", op.max_epochs);
        kv.set("plateau_patience", op.plateau_patience);
        kv.set("plateau_epsilon", op.plateau_epsilon);
        kv.set("crop_frames", self.crop_frames);
        kv.set("lambda_ce", self.lambda_ce);
        kv.set("reinit_threshold", self.reinit_threshold);
        kv.set("init", self.init);
        kv.set("init_noise", self.init_noise);
        if let Some(s) = self.max_stage {
            kv.set("max_stage", s);
        }
        kv.set("seed", self.seed);
        kv.set("workers", self.workers);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.model_config(Vec::new()).predictor().validate()?;
        let div = 1usize << (self.enc_channels.len().max(1) - 1);
        if self.crop_frames == 0 || self.crop_frames % div != 0 {
            return Err(Error::Config(format!(
                "crop_frames = {} must be a positive multiple of {div}",
                self.crop_frames
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be ≥ 1".into()));
        }
        if self.lambda_ce < 0.0 || self.reinit_threshold < 0.0 || self.init_noise < 0.0 {
            return Err(Error::Config("lambda_ce, reinit_threshold and init_noise must be ≥ 0".into()));
        }
        if let Some(s) = self.max_stage {
            if s > self.mode.last_stage().0 {
                return Err(Error::Config(format!(
                    "max_stage = {s} but mode `{}` stops at stage {}",
                    self.mode,
                    self.mode.last_stage().0
                )));
            }
        }
        Ok(())
    }

    pub fn last_stage(&self) -> CurriculumStage {
        self.max_stage.map_or(self.mode.last_stage(), CurriculumStage)
    }

    pub fn model_config(&self, labels: Vec<String>) -> ModelConfig {
        ModelConfig {
            prototypes: self.prototypes,
            bins: self.frontend.n_mels,
            enc_channels: self.enc_channels.clone(),
            dec_channels: self.dec_channels.clone(),
            enc_kernel: self.enc_kernel,
            dec_kernel: self.dec_kernel,
            slope_scale: self.slope_scale,
            shift_scale: self.shift_scale,
            leak: self.leak,
            floor_db: self.frontend.floor_db,
            f_min: self.frontend.f_min,
            f_max: self.frontend.f_max_hz(),
            sample_rate: self.frontend.sample_rate,
            win: self.frontend.win,
            hop: self.frontend.hop,
            labels,
        }
    }
}

/// Result of feeding one epoch loss to the plateau detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plateau {
    Improved,
    Waiting,
    /// The stage just moved up by one.
    Advanced,
    /// Plateau at the last stage: training is done.
    Converged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: CurriculumStage,
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub adam: Adam,
    pub epoch: usize,
    pub seed: u64,
    pub cluster_usage: Vec<usize>,
    /// Prototypes replaced at the end of the last epoch.
    pub reinitialized: Vec<usize>,
}

impl TrainState {
    pub fn new(model: &ProtoModel, seed: u64) -> Self {
        Self {
            stage: CurriculumStage::RAW,
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            adam: Adam::new(model),
            epoch: 0,
            seed,
            cluster_usage: vec![0; model.k()],
            reinitialized: Vec::new(),
        }
    }
}

/// Improvement means `loss < best·(1 − ε)`. After `patience` epochs without
/// one the stage advances (or training converges at the last stage).
pub fn plateau_check(state: &mut TrainState, loss: f64, patience: usize, epsilon: f64, last: CurriculumStage) -> Plateau {
    if loss < state.best_loss * (1.0 - epsilon) || state.best_loss.is_infinite() {
        state.best_loss = loss;
        state.epochs_since_improvement = 0;
        return Plateau::Improved;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement < patience {
        return Plateau::Waiting;
    }
    state.epochs_since_improvement = 0;
    state.best_loss = f64::INFINITY;
    if state.stage >= last {
        return Plateau::Converged;
    }
    state.stage = CurriculumStage(state.stage.0 + 1);
    Plateau::Advanced
}

/// Starting prototypes drawn from the training data.
pub fn init_prototypes(data: &Dataset, k: usize, mode: InitMode, noise: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::Contract("need at least one prototype".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("cannot initialize prototypes from an empty dataset".into()));
    }
    match mode {
        InitMode::SampleMeanNoise => {
            let bins = data.bins().unwrap_or(0);
            let mut mean = vec![0.0; bins];
            let mut count = 0usize;
            for e in &data.examples {
                for t in 0..e.spec.frames() {
                    for (f, m) in mean.iter_mut().enumerate() {
                        *m += e.spec.get(f, t);
                    }
                }
                count += e.spec.frames();
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let sigma = noise * dynamic_range(&mean);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            Ok((0..k)
                .map(|_| mean.iter().map(|m| m + normal.sample(rng)).collect())
                .collect())
        }
        InitMode::RandomFrames => {
            let cells: Vec<(usize, usize)> = data
                .examples
                .iter()
                .enumerate()
                .flat_map(|(i, e)| (0..e.spec.frames()).map(move |t| (i, t)))
                .collect();
            if k > cells.len() {
                return Err(Error::Contract(format!(
                    "{k} prototypes but only {} frames to draw from",
                    cells.len()
                )));
            }
            Ok(rand::seq::index::sample(rng, cells.len(), k)
                .into_iter()
                .map(|c| {
                    let (i, t) = cells[c];
                    data.examples[i].spec.column(t)
                })
                .collect())
        }
    }
}

fn dynamic_range(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// Replaces every prototype used by fewer than `threshold / K` of the
/// epoch's samples with a noisy copy of the most used one. Returns the
/// replaced indices.
pub fn reinit_empty_prototypes(model: &mut ProtoModel, adam: &mut Adam, usage: &[usize], threshold: f64, rng: &mut impl Rng) -> Vec<usize> {
    let total: usize = usage.iter().sum();
    let k = model.k();
    if total == 0 || k < 2 {
        return Vec::new();
    }
    let source = (0..k).fold(0, |b, i| if usage[i] > usage[b] { i } else { b });
    let base = model.prototype(source).to_vec();
    let sigma = (0.01 * dynamic_range(&base)).max(1e-3);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let bins = model.bins();
    let mut replaced = Vec::new();
    for i in 0..k {
        if i == source || (usage[i] as f64 / total as f64) >= threshold / k as f64 {
            continue;
        }
        for (dst, b) in model.prototypes.data[i * bins..(i + 1) * bins].iter_mut().zip(&base) {
            *dst = b + normal.sample(rng);
        }
        adam.reset_prototype(model, i);
        replaced.push(i);
    }
    replaced
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: CurriculumStage,
    pub loss: f64,
    pub plateau: Plateau,
    pub cluster_usage: Vec<usize>,
    pub reinitialized: Vec<usize>,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l_rec: Option<f64>,
}

/// Loss terms of a batch evaluated without updating anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub reconstruction: f64,
    pub cross_entropy: f64,
}

impl BatchLoss {
    pub fn total(&self, lambda_ce: f64) -> f64 {
        self.reconstruction + lambda_ce * self.cross_entropy
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: ProtoModel,
    pub state: TrainState,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Builds a model for `train` (prototype count, class names) and
    /// initializes its prototypes from the data.
    pub fn new(config: TrainConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if train.bins() != Some(config.frontend.n_mels) {
            return Err(Error::Data(format!(
                "training data has {} mel bins, config says n_mels = {}",
                train.bins().unwrap_or(0),
                config.frontend.n_mels
            )));
        }
        if train.floor_db() != Some(config.frontend.floor_db) {
            return Err(Error::Data(format!(
                "training data floor is {} dB, config says floor_db = {}",
                train.floor_db().unwrap_or(f64::NAN),
                config.frontend.floor_db
            )));
        }
        if config.mode == TrainMode::Supervised {
            if train.labels().is_none() {
                return Err(Error::Data("supervised training needs a label on every sample".into()));
            }
            if config.prototypes != train.classes.len() {
                return Err(Error::Data(format!(
                    "supervised mode uses as many prototypes as the number of classes: \
                     prototypes = {} but the manifest has {} classes",
                    config.prototypes,
                    train.classes.len()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ProtoModel::new(config.model_config(train.classes.clone()), &mut rng)?;
        let protos = init_prototypes(train, config.prototypes, config.init, config.init_noise, &mut rng)?;
        model.set_prototypes(&protos)?;
        Self::from_model(config, model)
    }

    pub fn from_model(config: TrainConfig, model: ProtoModel) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let state = TrainState::new(&model, config.seed);
        Ok(Self {
            config,
            model,
            state,
            pool,
        })
    }

    fn labels_for(&self, data: &Dataset) -> Result<Option<Vec<usize>>> {
        match self.config.mode {
            TrainMode::Unsupervised => Ok(None),
            TrainMode::Supervised => {
                let labels = data
                    .labels()
                    .ok_or_else(|| Error::Data("supervised training needs a label on every sample".into()))?;
                if let Some(&y) = labels.iter().find(|&&y| y >= self.model.k()) {
                    return Err(Error::Data(format!("label {y} outside 0..{}", self.model.k())));
                }
                Ok(Some(labels))
            }
        }
    }

    /// One shuffled pass over `data`; returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let labels = self.labels_for(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed ^ (self.state.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let crop_seeds: Vec<u64> = order.iter().map(|_| rng.random()).collect();
        self.state.cluster_usage = vec![0; self.model.k()];
        let mut total = 0.0;
        let mut batches = 0usize;
        let bs = self.config.optimizer.batch_size;
        for (idx, seeds) in order.chunks(bs).zip(crop_seeds.chunks(bs)) {
            let xs = idx
                .iter()
                .zip(seeds)
                .map(|(&i, &s)| tile_or_crop(&data.examples[i].spec, self.config.crop_frames, s))
                .collect::<Result<Vec<_>>>()?;
            let ys = labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect::<Vec<_>>());
            total += self.step(&xs, ys.as_deref())?;
            batches += 1;
        }
        if self.config.mode == TrainMode::Unsupervised {
            let usage = self.state.cluster_usage.clone();
            self.state.reinitialized =
                reinit_empty_prototypes(&mut self.model, &mut self.state.adam, &usage, self.config.reinit_threshold, &mut rng);
        }
        self.state.epoch += 1;
        Ok(total / batches as f64)
    }

    /// Per-sample loss, its error cotangents (before batch averaging) and
    /// `d loss / d ln β`.
    fn sample_objective(&self, errors: &[f64], label: Option<usize>, stage: CurriculumStage) -> (BatchLoss, Vec<f64>, f64) {
        let mut d = vec![0.0; errors.len()];
        match label {
            None => {
                let k = classify(errors);
                d[k] = 1.0;
                (
                    BatchLoss {
                        reconstruction: errors[k],
                        cross_entropy: 0.0,
                    },
                    d,
                    0.0,
                )
            }
            Some(y) => {
                d[y] = 1.0;
                let mut loss = BatchLoss {
                    reconstruction: errors[y],
                    cross_entropy: 0.0,
                };
                let mut d_beta_log = 0.0;
                if stage.cross_entropy() {
                    let beta = self.model.beta();
                    let lambda = self.config.lambda_ce;
                    loss.cross_entropy = prediction_loss(errors, y, beta);
                    let (de, db) = prediction_loss_grad(errors, y, beta);
                    for (a, b) in d.iter_mut().zip(de) {
                        *a += lambda * b;
                    }
                    d_beta_log = lambda * db * beta;
                }
                (loss, d, d_beta_log)
            }
        }
    }

    /// Forward/backward over a batch on the worker pool, one Adam update.
    fn step(&mut self, xs: &[LogMelSpectrogram], ys: Option<&[usize]>) -> Result<f64> {
        let n = xs.len();
        let stage = self.state.stage;
        let mask = stage.mask();
        let chunk = n.div_ceil(self.config.workers);
        let this = &*self;
        let parts: Vec<Result<(ProtoModel, f64, Vec<usize>)>> = self.pool.install(|| {
            xs.par_chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    let mut grad = this.model.zeros_like();
                    let mut loss = 0.0;
                    let mut winners = Vec::with_capacity(part.len());
                    for (j, x) in part.iter().enumerate() {
                        let label = ys.map(|y| y[c * chunk + j]);
                        let fwd = this.model.forward(x, mask)?;
                        let (l, mut d, d_beta_log) = this.sample_objective(&fwd.errors, label, stage);
                        d.iter_mut().for_each(|v| *v /= n as f64);
                        this.model.backward(x, &fwd, &d, d_beta_log / n as f64, &mut grad)?;
                        loss += l.total(this.config.lambda_ce);
                        winners.push(classify(&fwd.errors));
                    }
                    Ok((grad, loss, winners))
                })
                .collect()
        });
        let mut grad: Option<ProtoModel> = None;
        let mut loss = 0.0;
        for part in parts {
            let (g, l, winners) = part?;
            loss += l;
            for k in winners {
                self.state.cluster_usage[k] += 1;
            }
            match &mut grad {
                None => grad = Some(g),
                Some(acc) => acc.add_assign(&g),
            }
        }
        let grad = grad.ok_or_else(|| Error::Contract("empty batch".into()))?;
        self.state.adam.step(&mut self.model, &grad, &self.config.optimizer)?;
        Ok(loss / n as f64)
    }

    /// Mean loss terms of a batch at `stage`, leaving everything untouched.
    pub fn frozen_loss(&self, xs: &[LogMelSpectrogram], ys: Option<&[usize]>, stage: CurriculumStage) -> Result<BatchLoss> {
        let mut acc = BatchLoss {
            reconstruction: 0.0,
            cross_entropy: 0.0,
        };
        for (i, x) in xs.iter().enumerate() {
            let fwd = self.model.forward(x, stage.mask())?;
            let (l, _, _) = self.sample_objective(&fwd.errors, ys.map(|y| y[i]), stage);
            acc.reconstruction += l.reconstruction / xs.len() as f64;
            acc.cross_entropy += l.cross_entropy / xs.len() as f64;
        }
        Ok(acc)
    }

    /// Report on `eval` with the current model. In clustering mode the
    /// cluster map comes from `train`'s labels.
    pub fn evaluate(&self, train: &Dataset, eval: &Dataset) -> Result<EvalReport> {
        let labels = eval
            .labels()
            .ok_or_else(|| Error::Data("evaluation needs a label on every sample".into()))?;
        let rows = error_rows(eval, &self.model, self.config.workers)?;
        let mapping = match self.config.mode {
            TrainMode::Supervised => None,
            TrainMode::Unsupervised => Some(cluster_map(train, &self.model, self.config.workers)?),
        };
        report_from_rows(&rows, &labels, eval.classes.clone(), self.config.mode.eval_mode(), mapping.as_deref())
    }

    /// Trains until the last stage plateaus or the epoch budget runs out.
    /// `on_epoch` sees every record together with the model after that epoch.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, mut on_epoch: impl FnMut(&EpochRecord, &ProtoModel) -> Result<()>) -> Result<Vec<EpochRecord>> {
        let last = self.config.last_stage();
        let mut records = Vec::new();
        for _ in 0..self.config.optimizer.max_epochs {
            let loss = self.train_epoch(train)?;
            let stage = self.state.stage;
            let plateau = plateau_check(
                &mut self.state,
                loss,
                self.config.optimizer.plateau_patience,
                self.config.optimizer.plateau_epsilon,
                last,
            );
            let report = match val {
                Some(v) if v.labels().is_some() && train.labels().is_some() => Some(self.evaluate(train, v)?),
                _ => None,
            };
            let record = EpochRecord {
                epoch: self.state.epoch,
                stage,
                loss,
                plateau,
                cluster_usage: self.state.cluster_usage.clone(),
                reinitialized: self.state.reinitialized.clone(),
                beta: self.model.beta(),
                oa: report.as_ref().map(|r| r.oa),
                aa: report.as_ref().map(|r| r.aa),
                mean_l_rec: report.as_ref().map(|r| r.mean_l_rec),
            };
            log::info!(
                "epoch {} stage {} loss {:.6} {:?}",
                record.epoch,
                record.stage.0,
                record.loss,
                record.plateau
            );
            on_epoch(&record, &self.model)?;
            records.push(record);
            if plateau == Plateau::Converged {
                break;
            }
        }
        Ok(records)
    }
}

/// Majority map from `train`'s labels to the model's clusters.
pub fn cluster_map(train: &Dataset, model: &ProtoModel, workers: usize) -> Result<Vec<Option<usize>>> {
    let labels = train
        .labels()
        .ok_or_else(|| Error::Data("the cluster map needs labels on the training split".into()))?;
    let rows = error_rows(train, model, workers)?;
    let winners: Vec<usize> = rows.iter().map(|r| classify(r)).collect();
    Ok(majority_map(&winners, &labels, model.k(), train.classes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(k: usize, bins: usize) -> TrainConfig {
        TrainConfig {
            prototypes: k,
            frontend: FrontendConfig {
                n_mels: bins,
                ..FrontendConfig::default()
            },
            enc_channels: vec![4, 4],
            dec_channels: vec![4, 4],
            crop_frames: 4,
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                batch_size: 4,
                max_epochs: 3,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn state() -> TrainState {
        let cfg = tiny_config(2, 8);
        let model = ProtoModel::new(cfg.model_config(Vec::new()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        TrainState::new(&model, 0)
    }

    fn column(bins: usize, phase: f64) -> Vec<f64> {
        (0..bins).map(|f| -40.0 + 15.0 * ((f as f64 * 0.7 + phase).sin())).collect()
    }

    #[test]
    fn decreasing_loss_never_advances() {
        let mut s = state();
        for e in 0..50 {
            let p = plateau_check(&mut s, 100.0 - e as f64, 10, 1e-4, CurriculumStage::FILTERS);
            assert_eq!(p, Plateau::Improved);
        }
        assert_eq!(s.stage, CurriculumStage::RAW);
    }

    #[test]
    fn constant_loss_advances_after_patience() {
        let mut s = state();
        plateau_check(&mut s, 5.0, 10, 1e-4, CurriculumStage::FILTERS);
        for e in 1..=10 {
            let p = plateau_check(&mut s, 5.0, 10, 1e-4, CurriculumStage::FILTERS);
            if e < 10 {
                assert_eq!(p, Plateau::Waiting, "epoch {e}");
            } else {
                assert_eq!(p, Plateau::Advanced);
            }
        }
        assert_eq!(s.stage, CurriculumStage::GAIN);
        assert_eq!(s.epochs_since_improvement, 0);
    }

    #[test]
    fn improving_every_ninth_epoch_never_advances() {
        let mut s = state();
        let mut loss = 100.0;
        for e in 0..200 {
            if e % 9 == 0 {
                loss *= 0.9;
            }
            assert_ne!(plateau_check(&mut s, loss, 10, 1e-4, CurriculumStage::FILTERS), Plateau::Advanced);
        }
        assert_eq!(s.stage, CurriculumStage::RAW);
    }

    #[test]
    fn tiny_improvements_count_as_plateau() {
        let mut s = state();
        let mut loss = 1.0;
        let mut advanced = false;
        for _ in 0..11 {
            advanced |= plateau_check(&mut s, loss, 10, 1e-4, CurriculumStage::FILTERS) == Plateau::Advanced;
            loss *= 1.0 - 1e-6;
        }
        assert!(advanced);
    }

    #[test]
    fn last_stage_plateau_converges() {
        let mut s = state();
        s.stage = CurriculumStage::FILTERS;
        let mut last = Plateau::Improved;
        for _ in 0..11 {
            last = plateau_check(&mut s, 1.0, 10, 1e-4, CurriculumStage::FILTERS);
        }
        assert_eq!(last, Plateau::Converged);
        assert_eq!(s.stage, CurriculumStage::FILTERS);
    }

    #[test]
    fn init_modes() {
        let specs = vec![LogMelSpectrogram::filled(8, 3, -20.0, -80.0).unwrap(); 2];
        let data = Dataset::from_specs(specs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_prototypes(&data, 3, InitMode::SampleMeanNoise, 0.0, &mut rng).unwrap();
        assert!(p.iter().all(|c| c == &vec![-20.0; 8]));
        let p = init_prototypes(&data, 6, InitMode::RandomFrames, 0.0, &mut rng).unwrap();
        assert_eq!(p.len(), 6);
        assert!(matches!(
            init_prototypes(&data, 7, InitMode::RandomFrames, 0.0, &mut rng),
            Err(Error::Contract(_))
        ));

        let varied = Dataset::from_specs(vec![LogMelSpectrogram::tiled(&column(8, 0.0), 4, -80.0).unwrap()]).unwrap();
        let a = init_prototypes(&varied, 2, InitMode::SampleMeanNoise, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_prototypes(&varied, 2, InitMode::SampleMeanNoise, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn reinit_only_starved_prototypes() {
        let cfg = tiny_config(3, 8);
        let mut model = ProtoModel::new(cfg.model_config(Vec::new()), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        model
            .set_prototypes(&[column(8, 0.0), column(8, 1.0), column(8, 2.0)])
            .unwrap();
        let mut adam = Adam::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(reinit_empty_prototypes(&mut model, &mut adam, &[10, 10, 10], 0.2, &mut rng).is_empty());
        let replaced = reinit_empty_prototypes(&mut model, &mut adam, &[12, 0, 18], 0.2, &mut rng);
        assert_eq!(replaced, vec![1]);
        assert_ne!(model.prototype(1), model.prototype(2));
        let gap = model
            .prototype(1)
            .iter()
            .zip(model.prototype(2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 2.0, "noise is 1% of the range: {gap}");
        assert_eq!(model.prototype(0), column(8, 0.0).as_slice());
    }

    fn exact_copies(k: usize, bins: usize) -> (Dataset, Vec<Vec<f64>>) {
        let protos: Vec<Vec<f64>> = (0..k).map(|i| column(bins, i as f64 * 1.3)).collect();
        let examples = protos
            .iter()
            .enumerate()
            .map(|(i, p)| crate::dataset::Example {
                spec: LogMelSpectrogram::tiled(p, 4, -80.0).unwrap(),
                label: Some(i),
                path: format!("#{i}").into(),
            })
            .collect();
        let classes = (0..k).map(|i| format!("c{i}")).collect();
        (Dataset::new(examples, classes).unwrap(), protos)
    }

    #[test]
    fn prototype_copies_give_zero_loss() {
        let (data, protos) = exact_copies(3, 8);
        for mode in [TrainMode::Unsupervised, TrainMode::Supervised] {
            let cfg = TrainConfig {
                mode,
                lambda_ce: 0.0,
                ..tiny_config(3, 8)
            };
            let mut t = Trainer::new(cfg, &data).unwrap();
            t.model.set_prototypes(&protos).unwrap();
            let loss = t.train_epoch(&data).unwrap();
            assert!(loss < 1e-8, "{mode}: {loss}");
        }
    }

    #[test]
    fn supervised_requires_matching_prototype_count() {
        let (data, _) = exact_copies(3, 8);
        let cfg = TrainConfig {
            mode: TrainMode::Supervised,
            ..tiny_config(4, 8)
        };
        let err = Trainer::new(cfg, &data).err().unwrap().to_string();
        assert!(err.contains("as many prototypes as the number of classes"), "{err}");
    }

    #[test]
    fn seeded_runs_repeat_bitwise() {
        let (data, _) = exact_copies(3, 8);
        let run = || {
            let mut t = Trainer::new(tiny_config(2, 8), &data).unwrap();
            (0..3).map(|_| t.train_epoch(&data).unwrap().to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_is_pure_evaluation() {
        let (data, _) = exact_copies(3, 8);
        let mut cfg = tiny_config(3, 8);
        cfg.optimizer.learning_rate = 0.0;
        cfg.optimizer.prototype_learning_rate = Some(0.0);
        cfg.optimizer.batch_size = 8;
        cfg.reinit_threshold = 0.0;
        let mut t = Trainer::new(cfg, &data).unwrap();
        let a = t.train_epoch(&data).unwrap();
        let b = t.train_epoch(&data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = tiny_config(5, 16);
        cfg.max_stage = Some(2);
        cfg.optimizer.prototype_learning_rate = Some(0.05);
        cfg.optimizer.temperature_learning_rate = Some(0.01);
        cfg.frontend.f_max = Some(8000.0);
        let back = TrainConfig::parse(&cfg.to_kv().to_text()).unwrap();
        assert_eq!(back, cfg);
        let err = TrainConfig::parse("learning_rte = 0.1").unwrap_err().to_string();
        assert!(err.contains("learning_rte"));
        assert!(TrainConfig::parse("crop_frames = 5").is_err());
        assert!(TrainConfig::parse("mode = unsup\nmax_stage = 4").is_err());
    }
}
