use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use proto_audio::config::KeyValues;
use proto_audio::datagen::{gen_ground_truth, SyntheticSpec};
use proto_audio::dataset::{Dataset, Manifest, Split};
use proto_audio::evaluation::{cross_reconstruction_matrix, error_rows, report_from_rows, EvalReport};
use proto_audio::export::{prototype_audio, prototype_spectrogram, round_trip_correlation};
use proto_audio::frontend::write_wav;
use proto_audio::model::ProtoModel;
use proto_audio::render::{montage, render_spectrogram, render_with_colorbar, save_png};
use proto_audio::training::{cluster_map, Plateau, TrainConfig, TrainMode, Trainer};
use proto_audio::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(format!("{stem}.json")), &report.to_json())?;
    write_text(&dir.join(format!("{stem}_confusion.csv")), &report.confusion_csv())
}

fn print_report(what: &str, report: &EvalReport) {
    println!(
        "{what}: OA {:.2}  AA {:.2}  mean L_rec {:.4}  ({} samples)",
        report.oa, report.aa, report.mean_l_rec, report.samples
    );
}

pub fn train(
    config: &Path,
    manifest: &Path,
    mode: Option<TrainMode>,
    seed: Option<u64>,
    workers: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = TrainConfig::parse(&read_text(config)?)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let manifest = Manifest::read(manifest)?;
    let train = manifest.load(Split::Train, &cfg.frontend)?;
    let val = manifest.load(Split::Val, &cfg.frontend)?;
    info!("{} training and {} validation samples", train.len(), val.len());

    create_dir(&out.join("checkpoints"))?;
    write_text(&out.join("config.txt"), &cfg.to_kv().to_text())?;
    let run = serde_json::json!({
        "seed": cfg.seed,
        "mode": cfg.mode.to_string(),
        "workers": cfg.workers,
        "train_samples": train.len(),
        "val_samples": val.len(),
    });
    write_text(&out.join("run.json"), &format!("{run}\n"))?;

    let mut trainer = Trainer::new(cfg.clone(), &train)?;
    let mut log = String::new();
    let every = cfg.checkpoint_every;
    let checkpoints = out.join("checkpoints");
    let records = trainer.run(&train, Some(&val), |record, model| {
        log.push_str(&serde_json::to_string(record).expect("records serialize"));
        log.push('\n');
        write_text(&out.join("metrics.jsonl"), &log)?;
        if record.plateau == Plateau::Advanced || (every > 0 && record.epoch % every == 0) {
            model.save(&checkpoints.join(format!("epoch_{:04}.ckpt", record.epoch)))?;
        }
        Ok(())
    })?;
    trainer.model.save(&out.join("model.ckpt"))?;
    let last = records.last();
    println!(
        "trained {} epochs, final stage {}, loss {:.4}",
        records.len(),
        last.map_or(0, |r| r.stage.0),
        last.map_or(f64::NAN, |r| r.loss)
    );
    if val.labels().is_some() && train.labels().is_some() {
        // report on the saved (f32) weights so `eval` on the checkpoint agrees exactly
        let saved = Trainer::from_model(cfg, ProtoModel::load(&out.join("model.ckpt"))?)?;
        let report = saved.evaluate(&train, &val)?;
        write_report(out, "report", &report)?;
        print_report("validation", &report);
    } else {
        warn!("unlabeled data: no final report");
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, manifest: &Path, split: Split, mode: TrainMode, workers: usize, out: Option<&Path>) -> Result<()> {
    if workers == 0 {
        return Err(Error::Config("workers must be ≥ 1".into()));
    }
    let model = ProtoModel::load(checkpoint)?;
    let manifest = Manifest::read(manifest)?;
    if manifest.rows_in(split).next().is_none() {
        return Err(Error::Config(format!("split `{split}` has no rows in the manifest")));
    }
    let frontend = model.config.frontend();
    let data = manifest.load(split, &frontend)?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::Data("evaluation needs a label on every sample".into()))?;
    let mapping = match mode {
        TrainMode::Supervised => None,
        TrainMode::Unsupervised => Some(cluster_map(&manifest.load(Split::Train, &frontend)?, &model, workers)?),
    };
    let rows = error_rows(&data, &model, workers)?;
    let report = report_from_rows(&rows, &labels, data.classes.clone(), mode.eval_mode(), mapping.as_deref())?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&dir)?;
    write_report(&dir, &format!("eval_{split}"), &report)?;
    print_report(&split.to_string(), &report);
    Ok(())
}

pub struct ExportWhat {
    pub protos: bool,
    pub audio: bool,
    pub grid: bool,
}

fn prototype_name(model: &ProtoModel, k: usize) -> String {
    match model.config.labels.get(k) {
        Some(label) if model.config.labels.len() == model.k() => format!("prototype_{k:02}_{}", sanitize(label)),
        _ => format!("prototype_{k:02}"),
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

const IMAGE_FRAMES: usize = 32;
const PIXELS_PER_CELL: u32 = 4;

pub fn export(checkpoint: &Path, out: &Path, what: ExportWhat, manifest: Option<&Path>, split: Split, grid_size: usize) -> Result<()> {
    let model = ProtoModel::load(checkpoint)?;
    create_dir(out)?;
    let floor = model.config.floor_db;
    let top = (0..model.k())
        .flat_map(|k| model.prototype(k).iter().copied())
        .fold(floor + 1.0, f64::max);
    if what.protos {
        for k in 0..model.k() {
            let spec = prototype_spectrogram(&model, k, IMAGE_FRAMES)?;
            let img = render_with_colorbar(&spec, floor, top, PIXELS_PER_CELL);
            save_png(&out.join(format!("{}.png", prototype_name(&model, k))), &img)?;
        }
    }
    if what.audio {
        let iters = model.config.frontend().griffin_lim_iters;
        for k in 0..model.k() {
            let audio = prototype_audio(&model, k, 1.0, iters)?;
            write_wav(&out.join(format!("{}.wav", prototype_name(&model, k))), &audio)?;
            info!("prototype {k}: round-trip correlation {:.3}", round_trip_correlation(&model, k, &audio)?);
        }
    }
    if what.grid {
        let manifest = manifest.ok_or_else(|| Error::Config("--what grid needs --manifest".into()))?;
        let data = Manifest::read(manifest)?.load(split, &model.config.frontend())?;
        export_grid(&model, &data, grid_size, out)?;
    }
    Ok(())
}

/// Reconstructions of the first `size` samples by the first `size`
/// prototypes, best prototype per row outlined, plus the error table.
fn export_grid(model: &ProtoModel, data: &Dataset, size: usize, out: &Path) -> Result<()> {
    if size == 0 {
        return Err(Error::Config("grid size must be ≥ 1".into()));
    }
    let samples: Vec<_> = data.examples.iter().take(size).map(|e| e.spec.clone()).collect();
    let prototypes: Vec<usize> = (0..model.k().min(size)).collect();
    let cross = cross_reconstruction_matrix(&samples, &prototypes, model)?;
    let floor = model.config.floor_db;
    let top = samples
        .iter()
        .flat_map(|s| s.values().iter().copied())
        .fold(floor + 1.0, f64::max);
    let cells: Vec<Vec<_>> = cross
        .reconstructions
        .iter()
        .zip(&samples)
        .map(|(row, x)| {
            std::iter::once(x)
                .chain(row)
                .map(|s| render_spectrogram(s, floor, top, PIXELS_PER_CELL))
                .collect()
        })
        .collect();
    // column 0 holds the input, so the highlighted cell is one to the right
    let highlight: Vec<usize> = cross.best.iter().map(|b| b + 1).collect();
    save_png(&out.join("grid.png"), &montage(&cells, Some(&highlight)))?;
    write_text(&out.join("grid_errors.csv"), &cross.errors_csv(&prototypes))
}

/// Generator settings: defaults overridden by `key = value` lines.
fn synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let mut kv = KeyValues::parse(text)?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        classes: kv.take_or("classes", d.classes)?,
        bins: kv.take_or("bins", d.bins)?,
        frames: kv.take_or("frames", d.frames)?,
        gain_range: (kv.take_or("gain_min", d.gain_range.0)?, kv.take_or("gain_max", d.gain_range.1)?),
        shift_range: (kv.take_or("shift_min", d.shift_range.0)?, kv.take_or("shift_max", d.shift_range.1)?),
        slope_range: (kv.take_or("slope_min", d.slope_range.0)?, kv.take_or("slope_max", d.slope_range.1)?),
        noise_snr_db: kv.take_or("noise_snr_db", d.noise_snr_db)?,
        per_class: kv.take_or("per_class", d.per_class)?,
        seed: kv.take_or("seed", d.seed)?,
        floor_db: kv.take_or("floor_db", d.floor_db)?,
        class_gain_ranges: None,
        shared_prototype: kv.take_or("shared_prototype", d.shared_prototype)?,
        smoothing: kv.take_or("smoothing", d.smoothing)?,
    };
    kv.finish()?;
    spec.validate()?;
    Ok(spec)
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match config {
        Some(p) => synthetic_spec(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let truth = gen_ground_truth(&spec)?;
    let manifest = truth.write_dataset(out, spec.seed)?;
    println!(
        "wrote {} samples of {} classes to {}",
        manifest.rows.len(),
        spec.classes,
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_spec_overrides_and_rejects_unknown_keys() {
        let s = synthetic_spec("classes = 2\nper_class = 5\nshift_min = 1\nshift_max = 1\n").unwrap();
        assert_eq!((s.classes, s.per_class, s.shift_range), (2, 5, (1.0, 1.0)));
        assert!(matches!(synthetic_spec("clases = 2"), Err(Error::Config(m)) if m.contains("clases")));
        assert!(synthetic_spec("shift_min = 0.1").is_err());
    }

    #[test]
    fn names_are_filesystem_safe() {
        assert_eq!(sanitize("a b/c-d_e"), "a_b_c-d_e");
    }
}
