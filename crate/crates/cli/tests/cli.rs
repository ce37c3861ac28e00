use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SYNTH: &str = "classes = 2\nbins = 16\nframes = 8\nper_class = 10\n";

const TRAIN: &str = "\
mode = unsup
prototypes = 2
n_mels = 16
enc_channels = 4, 4
dec_channels = 4, 4
crop_frames = 8
init = random-frames
learning_rate = 0.001
prototype_learning_rate = 0.1
batch_size = 4
max_epochs = 6
plateau_patience = 1
griffin_lim_iters = 4
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protoaudio"))
        .args(args)
        .env("PROTO_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("synth.txt"), SYNTH).unwrap();
        fs::write(dir.path().join("train.txt"), TRAIN).unwrap();
        let f = Self { dir };
        ok(&["synth", "--config", s(&f.path("synth.txt")), "--seed", "3", "--out", s(&f.path("data"))]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let config = self.path("train.txt");
        let manifest = self.path("data/manifest.csv");
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&config), "--manifest", s(&manifest), "--out", s(&out), "--workers", "1"];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_eval_export_round() {
    let f = Fixture::new();
    let manifest = fs::read_to_string(f.path("data/manifest.csv")).unwrap();
    assert!(manifest.starts_with("path,label,split"));
    assert_eq!(manifest.lines().count(), 21);

    let out = f.train("run", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.path("run/model.ckpt").is_file());
    let log = fs::read_to_string(f.path("run/metrics.jsonl")).unwrap();
    let stages: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["stage"].as_u64().unwrap())
        .collect();
    assert!(!stages.is_empty());
    assert!(stages.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1), "{stages:?}");
    assert_eq!(json(&f.path("run/run.json"))["seed"], 0);

    // evaluating the validation split reproduces the trainer's final report
    let ckpt = f.path("run/model.ckpt");
    let data = f.path("data/manifest.csv");
    let stdout = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&data), "--split", "val"]);
    assert!(stdout.contains("OA") && stdout.contains("AA") && stdout.contains("L_rec"));
    assert_eq!(json(&f.path("run/eval_val.json")), json(&f.path("run/report.json")));
    assert!(f.path("run/eval_val_confusion.csv").is_file());

    // the cluster map comes from the train split whatever split is scored
    ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&data), "--split", "test"]);
    assert_eq!(
        json(&f.path("run/eval_test.json"))["cluster_to_class"],
        json(&f.path("run/eval_val.json"))["cluster_to_class"]
    );

    let exp = f.path("export");
    ok(&[
        "export", "--checkpoint", s(&ckpt), "--out", s(&exp), "--what", "protos,audio,grid",
        "--manifest", s(&data), "--grid-size", "3",
    ]);
    let mut names: Vec<String> = fs::read_dir(&exp)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "grid.png",
            "grid_errors.csv",
            "prototype_00_class_0.png",
            "prototype_00_class_0.wav",
            "prototype_01_class_1.png",
            "prototype_01_class_1.wav",
        ]
    );
    let grid = fs::read_to_string(exp.join("grid_errors.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("sample,prototype_0,prototype_1"));
    assert_eq!(grid.lines().count(), 4);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        assert!(f.train(out, &["--seed", "5"]).status.success());
    }
    for file in ["metrics.jsonl", "report.json", "model.ckpt"] {
        assert_eq!(fs::read(f.path("a").join(file)).unwrap(), fs::read(f.path("b").join(file)).unwrap(), "{file}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let f = Fixture::new();

    let out = f.train("sup", &["--mode", "sup"]);
    assert!(out.status.success(), "2 prototypes for 2 classes is fine");
    fs::write(f.path("train.txt"), TRAIN.replace("prototypes = 2", "prototypes = 3")).unwrap();
    let out = f.train("bad_k", &["--mode", "sup"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("as many prototypes as the number of classes"));

    fs::write(f.path("train.txt"), format!("{TRAIN}learning_rat = 0.1\n")).unwrap();
    let out = f.train("bad_key", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = run(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    // a manifest without test rows
    let manifest = fs::read_to_string(f.path("data/manifest.csv")).unwrap();
    let kept: Vec<&str> = manifest.lines().filter(|l| !l.ends_with(",test")).collect();
    fs::write(f.path("data/no_test.csv"), kept.join("\n") + "\n").unwrap();
    let ckpt = f.path("sup/model.ckpt");
    let out = run(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&f.path("data/no_test.csv"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["eval", "--checkpoint", s(&f.path("missing.ckpt")), "--manifest", s(&f.path("data/manifest.csv"))]);
    assert_eq!(out.status.code(), Some(3));
}
