use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use weatherfusion::container::Container;
use weatherfusion::data::read_archive;
use weatherfusion::evaluate::{eval_windows, evaluate};
use weatherfusion::train::{model_from_checkpoint, read_log};
use weatherfusion::checkpoint::Checkpoint;

const TINY: &str = r#"{
  "model": {
    "preset": "reduced",
    "sat2rad": {"filters": [2, 4]},
    "fusion": {"filters": [2, 4]},
    "phydnet": {"latent_channels": 4, "convlstm_hidden": [4], "encoder_downscale": 2}
  },
  "train": {"batch_size": 2, "max_steps": 3, "val_stride": 1}
}"#;

fn wfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfn"))
        .args(args)
        .env_remove("WFN_OUT_DIR")
        .output()
        .expect("run wfn")
}

fn ok(args: &[&str]) -> String {
    let out = wfn(args);
    assert!(out.status.success(), "wfn {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

/// One tiny pipeline shared by the tests: archive, config and all three stages.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture { _dir: dir, root };
        std::fs::write(f.path("cfg.json"), TINY).unwrap();
        let (cfg, data) = (f.path("cfg.json"), f.path("wet.wfn"));
        ok(&["generate", "--seed", "100", "--frames", "40", "--geometry", "reduced", "--out", s(&data)]);
        for stage in ["sat2rad", "phydnet"] {
            ok(&["train", "--stage", stage, "--data", s(&data), "--config", s(&cfg), "--out", s(&f.path(stage))]);
        }
        ok(&[
            "train", "--stage", "fusion", "--data", s(&data), "--config", s(&cfg),
            "--sat2rad-ckpt", s(&f.path("sat2rad/checkpoint.wfn")),
            "--phydnet-ckpt", s(&f.path("phydnet/checkpoint.wfn")),
            "--out", s(&f.path("fusion")),
        ]);
        f
    })
}

#[test]
fn generate_reads_back_full_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.wfn");
    let stdout = ok(&["generate", "--frames", "2", "--out", s(&p)]);
    assert!(stdout.contains("frames 2"));
    let a = read_archive(&p).unwrap();
    assert_eq!(a.satellite.shape(), [2, 11, 252, 252]);
    assert_eq!(a.radar.shape(), [2, 252, 252]);
    let manifest: Value = serde_json::from_slice(&bytes(&dir.path().join("a.wfn.manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn generate_is_seed_deterministic_and_reports_dry_archives() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.wfn"), dir.path().join("b.wfn"));
    for p in [&a, &b] {
        ok(&["generate", "--seed", "5", "--frames", "3", "--geometry", "reduced", "--out", s(p)]);
    }
    assert_eq!(bytes(&a), bytes(&b));
    let dry = ok(&["generate", "--cells", "0", "--frames", "2", "--geometry", "reduced", "--out", s(&a)]);
    assert!(dry.contains("wet fraction 0.0000"), "{dry}");
}

#[test]
fn fusion_without_upstream_checkpoint_is_a_usage_error() {
    let f = fixture();
    let out = wfn(&[
        "train", "--stage", "fusion", "--data", s(&f.path("wet.wfn")), "--config", s(&f.path("cfg.json")),
        "--phydnet-ckpt", s(&f.path("phydnet/checkpoint.wfn")), "--out", s(&f.path("nope")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--sat2rad-ckpt") && err.contains("--stage sat2rad"), "{err}");
}

#[test]
fn training_writes_log_checkpoint_and_manifest() {
    let f = fixture();
    let log = std::fs::read_to_string(f.path("sat2rad/log.csv")).unwrap();
    assert!(log.starts_with("step,split,loss,iou,csi,f1\n"));
    let rows = read_log(f.path("sat2rad/log.csv")).unwrap();
    assert_eq!(rows.iter().filter(|r| r.split == "train").count(), 3);
    let ck = Checkpoint::load(f.path("fusion/checkpoint.wfn")).unwrap();
    assert_eq!(ck.step, 3);
    let manifest: Value = serde_json::from_slice(&bytes(&f.path("fusion/manifest.json"))).unwrap();
    assert_eq!(manifest["config"]["train"]["stage"], "fusion");
    assert_eq!(manifest["config"]["model"]["fusion"]["in_channels"], 158);
    assert!(manifest["inputs"].as_object().unwrap().len() >= 4);
}

#[test]
fn resume_continues_the_step_counter_and_matches_a_straight_run() {
    let f = fixture();
    let (data, cfg) = (f.path("wet.wfn"), f.path("cfg.json"));
    let resumed = f.path("resumed");
    ok(&[
        "train", "--stage", "sat2rad", "--data", s(&data), "--config", s(&cfg), "--steps", "5",
        "--resume", s(&f.path("sat2rad/checkpoint.wfn")), "--out", s(&resumed),
    ]);
    let steps: Vec<u64> = read_log(resumed.join("log.csv")).unwrap().iter().filter(|r| r.split == "train").map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5]);

    let straight = f.path("straight");
    ok(&["train", "--stage", "sat2rad", "--data", s(&data), "--config", s(&cfg), "--steps", "5", "--out", s(&straight)]);
    let a = Checkpoint::load(resumed.join("checkpoint.wfn")).unwrap();
    let b = Checkpoint::load(straight.join("checkpoint.wfn")).unwrap();
    assert_eq!(a.modules, b.modules);
    assert_eq!(a.step, 5);
}

#[test]
fn training_is_bit_reproducible() {
    let f = fixture();
    let again = f.path("phydnet-again");
    ok(&["train", "--stage", "phydnet", "--data", s(&f.path("wet.wfn")), "--config", s(&f.path("cfg.json")), "--out", s(&again)]);
    assert_eq!(bytes(&again.join("checkpoint.wfn")), bytes(&f.path("phydnet/checkpoint.wfn")));
}

#[test]
fn resume_refuses_to_overwrite_its_input() {
    let f = fixture();
    let dir = f.path("sat2rad");
    let out = wfn(&[
        "train", "--stage", "sat2rad", "--data", s(&f.path("wet.wfn")), "--config", s(&f.path("cfg.json")),
        "--resume", s(&dir.join("checkpoint.wfn")), "--out", s(&dir),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_writes_a_deterministic_stack_and_panel() {
    let f = fixture();
    let model = f.path("fusion/checkpoint.wfn");
    let before = (bytes(&model), bytes(&f.path("wet.wfn")));
    let (p1, p2) = (f.path("pred1"), f.path("pred2"));
    for p in [&p1, &p2] {
        ok(&["predict", "--model", s(&model), "--data", s(&f.path("wet.wfn")), "--sample", "1", "--out", s(p)]);
    }
    assert_eq!(bytes(&p1.join("prediction.wfn")), bytes(&p2.join("prediction.wfn")));
    assert_eq!(before, (bytes(&model), bytes(&f.path("wet.wfn"))));

    let c = Container::read(p1.join("prediction.wfn")).unwrap();
    let probs = c.get("probability").unwrap();
    assert_eq!(probs.shape(), [32, 60, 60]);
    assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let binary = c.get("binary").unwrap();
    assert!(probs.data().iter().zip(binary.data()).all(|(&p, &b)| b == if p >= 0.5 { 1.0 } else { 0.0 }));
    let panel = image::open(p1.join("panel.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (32 * 62 - 2, 3 * 62 - 2));

    let out = wfn(&["predict", "--model", s(&model), "--data", s(&f.path("wet.wfn")), "--sample", "99", "--out", s(&p1)]);
    assert_eq!(out.status.code(), Some(2));
}

fn metrics(dir: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(dir.join("metrics.csv")).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn evaluate_oracle_and_empty_predictors() {
    let f = fixture();
    let model = f.path("fusion/checkpoint.wfn");
    let (oracle, empty) = (f.path("ev-oracle"), f.path("ev-empty"));
    ok(&["evaluate", "--model", s(&model), "--data", s(&f.path("wet.wfn")), "--predictor", "oracle", "--out", s(&oracle)]);
    ok(&["evaluate", "--model", s(&model), "--data", s(&f.path("wet.wfn")), "--predictor", "empty", "--out", s(&empty)]);
    assert_eq!(&metrics(&oracle)[0][1], "1");
    let e = &metrics(&empty)[0];
    assert_eq!((&e[1], &e[4]), ("0", "0"));
    assert_ne!(&e[6], "0", "archive must be wet for the empty check");
    let curve: Vec<_> = csv::Reader::from_path(oracle.join("iou_over_time.csv")).unwrap().records().map(Result::unwrap).collect();
    assert_eq!(curve.len(), 32);
    assert_eq!(&curve[31][1], "480");
    assert!(image::open(oracle.join("iou_over_time.png")).is_ok());
}

#[test]
fn evaluate_csv_matches_library_metrics() {
    let f = fixture();
    let model = f.path("fusion/checkpoint.wfn");
    let out = f.path("ev-model");
    ok(&["evaluate", "--model", s(&model), "--data", s(&f.path("wet.wfn")), "--stride", "2", "--out", s(&out)]);
    let net = model_from_checkpoint(&Checkpoint::load(&model).unwrap()).unwrap();
    let archives = vec![read_archive(f.path("wet.wfn")).unwrap()];
    let windows = eval_windows(&net, &archives, 2).unwrap();
    let lib = evaluate(&net, &archives, &windows, 0.5, 0.2).unwrap();
    let rows = metrics(&out);
    for (row, report) in rows.iter().zip([&lib.model, &lib.persistence]) {
        assert_eq!(row[1].parse::<f64>().unwrap(), report.iou);
        assert_eq!(row[3].parse::<f64>().unwrap(), report.f1);
        assert_eq!(row[4].parse::<u64>().unwrap(), report.confusion.tp);
        assert_eq!(row[6].parse::<u64>().unwrap(), report.confusion.fn_);
    }
    assert_eq!(&rows[1][0], "persistence");
}

#[test]
fn error_exit_codes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.wfn");
    std::fs::write(&bad, b"not an archive").unwrap();
    let out = wfn(&["train", "--stage", "sat2rad", "--data", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = wfn(&["generate", "--device", "cuda", "--out", s(&dir.path().join("x.wfn"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(wfn(&["train", "--stage", "nonsense", "--data", "x", "--out", "y"]).status.code(), Some(2));
    let out = wfn(&["train", "--stage", "sat2rad", "--data", s(&f.path("wet.wfn")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "default geometry does not match a reduced archive");
}

#[test]
fn out_dir_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("env.wfn");
    let out = Command::new(env!("CARGO_BIN_EXE_wfn"))
        .args(["generate", "--frames", "1", "--geometry", "reduced"])
        .env("WFN_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.exists());
}
