use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use wadi_core::checkpoint::Checkpoint;
use wadi_core::diffusion::DiffusionModel;

const TINY: &str = r#"{
  "data_size": 256,
  "model": {"hidden": 16, "depth": 2, "time_dim": 8, "cond_dim": 4},
  "train": {"steps": 30, "batch_size": 64},
  "distill": {"rank_student": 4, "steps": 4, "eval_interval": 2, "eval_samples": 64, "teacher_sample_steps": 5, "batch_size": 32},
  "ablation": {"kinds": ["lora", "lorad"], "ranks": [4, 2]},
  "sample": {"n": 40, "steps": 5}
}"#;

fn wadi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wadi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = wadi(args);
    assert!(out.status.success(), "wadi {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    teacher_out: PathBuf,
    distill_out: PathBuf,
}

impl Fixture {
    fn teacher(&self) -> PathBuf {
        self.teacher_out.join("checkpoints/teacher.wadi")
    }

    fn student(&self) -> PathBuf {
        self.distill_out.join("checkpoints/student_merged.wadi")
    }

    fn scratch(&self, name: &str) -> PathBuf {
        self._dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let teacher_out = dir.path().join("teacher");
        let distill_out = dir.path().join("distill");
        ok(&["train-teacher", "--config", s(&config), "--out", s(&teacher_out)]);
        let teacher = teacher_out.join("checkpoints/teacher.wadi");
        ok(&["distill", "--config", s(&config), "--out", s(&distill_out), "--teacher", s(&teacher)]);
        Fixture {
            _dir: dir,
            config,
            teacher_out,
            distill_out,
        }
    })
}

#[test]
fn train_teacher_writes_layout_and_loadable_checkpoint() {
    let f = fixture();
    for rel in ["config.json", "checkpoints/teacher.wadi", "metrics/teacher_loss.csv", "reports/teacher.json"] {
        assert!(f.teacher_out.join(rel).is_file(), "{rel} missing");
    }
    let model = DiffusionModel::from_checkpoint(&Checkpoint::load(f.teacher()).unwrap()).unwrap();
    assert_eq!(model.denoiser.config().hidden, 16);
    let loss = fs::read_to_string(f.teacher_out.join("metrics/teacher_loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 31);
}

#[test]
fn train_teacher_is_byte_reproducible() {
    let f = fixture();
    let again = f.scratch("teacher-again");
    ok(&["train-teacher", "--config", s(&f.config), "--out", s(&again)]);
    assert_eq!(fs::read(f.teacher()).unwrap(), fs::read(again.join("checkpoints/teacher.wadi")).unwrap());
    let other = f.scratch("teacher-seed");
    ok(&["train-teacher", "--config", s(&f.config), "--out", s(&other), "--seed", "9"]);
    assert_ne!(fs::read(f.teacher()).unwrap(), fs::read(other.join("checkpoints/teacher.wadi")).unwrap());
}

#[test]
fn invalid_dataset_names_valid_kinds() {
    let out = wadi(&["train-teacher", "--dataset", "spiral", "--out", "/nonexistent/never"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for kind in ["gaussian-mixture-8", "two-moons", "swiss-roll"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn bad_config_rejected_before_any_output() {
    let f = fixture();
    let cfg = f.scratch("bad.json");
    let out_dir = f.scratch("bad-out");
    fs::write(&cfg, r#"{"train": {"step": 10}}"#).unwrap();
    let out = wadi(&["train-teacher", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
    fs::write(&cfg, r#"{"distill": {"ratio": 0}}"#).unwrap();
    assert!(!wadi(&["train-teacher", "--config", s(&cfg), "--out", s(&out_dir)]).status.success());
    assert!(!out_dir.exists());
}

#[test]
fn flags_override_config_and_are_echoed() {
    let f = fixture();
    let out_dir = f.scratch("echo");
    ok(&[
        "sample", "--config", s(&f.config), "--out", s(&out_dir), "--model", s(&f.teacher()), "--n", "3", "--seed", "7",
    ]);
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 7);
    assert_eq!(echoed["sample"]["n"], 3);
    assert_eq!(echoed["sample"]["steps"], 5);
    assert_eq!(echoed["model"]["hidden"], 16);
}

#[test]
fn distill_outputs() {
    let f = fixture();
    let csv = fs::read_to_string(f.distill_out.join("metrics/distill.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,gen_loss,fake_loss,w2,mmd,coverage"));
    // steps / eval_interval + 1 rows after the header
    assert_eq!(csv.lines().count(), 1 + 4 / 2 + 1);
    for rel in ["checkpoints/student_adapters.wadi", "checkpoints/fake_adapters.wadi", "reports/distill_summary.json"] {
        assert!(f.distill_out.join(rel).is_file(), "{rel} missing");
    }
    let adapters = Checkpoint::load(f.distill_out.join("checkpoints/student_adapters.wadi")).unwrap();
    assert!(adapters.names().any(|n| n == "fc0.lorad.A"));
    assert!(adapters.names().all(|n| !n.ends_with(".weight")));
}

#[test]
fn merged_student_samples_reproduce() {
    let f = fixture();
    let a = f.scratch("student-a");
    let b = f.scratch("student-b");
    for dir in [&a, &b] {
        ok(&["sample", "--config", s(&f.config), "--out", s(dir), "--model", s(&f.student()), "--steps", "1"]);
    }
    let bytes = fs::read(a.join("reports/samples.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.join("reports/samples.csv")).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 41);
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[0].is_finite() && v[1].is_finite());
    }
}

#[test]
fn sample_zero_is_header_only() {
    let f = fixture();
    let out_dir = f.scratch("empty");
    ok(&["sample", "--config", s(&f.config), "--out", s(&out_dir), "--model", s(&f.teacher()), "--n", "0"]);
    assert_eq!(fs::read_to_string(out_dir.join("reports/samples.csv")).unwrap(), "x,y,label\n");
}

#[test]
fn distill_rejects_mismatched_teacher() {
    let f = fixture();
    let out = wadi(&["distill", "--out", s(&f.scratch("mismatch")), "--teacher", s(&f.teacher())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture mismatch"));
}

#[test]
fn analyze_self_is_zero_drift() {
    let f = fixture();
    let out_dir = f.scratch("analyze-self");
    ok(&["analyze", s(&f.teacher()), s(&f.teacher()), "--out", s(&out_dir)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("reports/drift.json")).unwrap()).unwrap();
    assert_eq!(report["drift"]["norm_mean"], 0.0);
    assert!(report["drift"]["direction_mean"].as_f64().unwrap().abs() < 1e-12);
    assert_energy_files_end_at_one(&out_dir);
}

#[test]
fn analyze_student_against_teacher() {
    let f = fixture();
    let out_dir = f.scratch("analyze");
    ok(&["analyze", s(&f.student()), s(&f.teacher()), "--out", s(&out_dir)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("reports/drift.json")).unwrap()).unwrap();
    assert!(report["drift"]["norm_mean"].as_f64().unwrap() < 1e-7);
    assert!(report["drift"]["direction_mean"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(out_dir.join("reports/drift.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_energy_files_end_at_one(&out_dir);
}

fn assert_energy_files_end_at_one(dir: &Path) {
    let mut seen = 0;
    for entry in fs::read_dir(dir.join("reports")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if !name.starts_with("energy_") {
            continue;
        }
        seen += 1;
        let text = fs::read_to_string(&path).unwrap();
        let last = text.lines().last().unwrap();
        assert_eq!(last.rsplit(',').next(), Some("1"), "{name}");
    }
    // fc0, fc1, fc2 and the pooled curve
    assert_eq!(seen, 4);
}

#[test]
fn swap_with_itself_is_byte_equal() {
    let f = fixture();
    let out_dir = f.scratch("swap-self");
    ok(&["swap", "--direction", s(&f.student()), "--norm", s(&f.student()), "--out", s(&out_dir)]);
    assert_eq!(fs::read(f.student()).unwrap(), fs::read(out_dir.join("checkpoints/hybrid.wadi")).unwrap());
}

#[test]
fn swap_takes_norms_and_directions() {
    let f = fixture();
    let out_dir = f.scratch("swap");
    ok(&["swap", "--direction", s(&f.teacher()), "--norm", s(&f.student()), "--out", s(&out_dir)]);
    let hybrid = Checkpoint::load(out_dir.join("checkpoints/hybrid.wadi")).unwrap();
    let teacher = Checkpoint::load(f.teacher()).unwrap();
    // the student keeps the teacher's norms, so this hybrid is the teacher again
    for (name, t) in teacher.iter() {
        let h = hybrid.require(name).unwrap();
        for (a, b) in h.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{name}");
        }
    }
}

#[test]
fn ablate_table() {
    let f = fixture();
    let out_dir = f.scratch("ablate");
    ok(&["ablate", "--config", s(&f.config), "--out", s(&out_dir), "--teacher", s(&f.teacher())]);
    let csv = fs::read_to_string(out_dir.join("reports/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(labels, ["lora", "lorad", "lorad-r2", "lorad-r4"]);
    let params = |label: &str| rows.iter().find(|r| r[0] == label).unwrap()[2].parse::<usize>().unwrap();
    assert!(params("lorad") < params("lora"));
    assert!(rows.iter().all(|r| r[8].is_empty()));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("reports/ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 4);
}

#[test]
fn ablate_single_cell() {
    let f = fixture();
    let cfg = f.scratch("one.json");
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["ablation"] = serde_json::json!({"kinds": [], "ranks": [2]});
    fs::write(&cfg, v.to_string()).unwrap();
    let out_dir = f.scratch("ablate-one");
    ok(&["ablate", "--config", s(&cfg), "--out", s(&out_dir), "--teacher", s(&f.teacher())]);
    let csv = fs::read_to_string(out_dir.join("reports/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
