use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featalign::config::RunConfig;
use featalign::pipeline::{self, RunDir};
use featalign::training::{ARM_FEATURE_ONLY, ARM_JOINT, ARM_SOFT_ONLY};

const SMOKE: &str = include_str!("../../../configs/smoke.json");

fn featalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featalign"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes `json` as the config of a fresh run directory under `tmp`.
fn setup(tmp: &Path, name: &str, json: &str) -> (PathBuf, PathBuf) {
    let run = tmp.join(name);
    let cfg = tmp.join(format!("{name}.json"));
    let mut v: serde_json::Value = serde_json::from_str(json).unwrap();
    v["output"]["run_dir"] = serde_json::Value::String(run.display().to_string());
    fs::write(&cfg, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    (cfg, run)
}

fn ok(args: &[&str]) -> Output {
    let o = featalign(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = featalign(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    for (json, path) in [
        (r#"{"distillation": {"tau": 0}}"#, "path=distillation.tau"),
        (r#"{"distillation": {"tua": 2}}"#, "path=distillation.tua"),
        (r#"{"training": {"student": {"steps": -1}}}"#, "path=training.student.steps"),
    ] {
        let (cfg, _) = setup(tmp.path(), "bad", json);
        let o = featalign(&["gen-data", "-c", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{json}");
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error kind=config ") && err.contains(path), "{err}");
    }
}

#[test]
fn missing_teacher_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, run) = setup(tmp.path(), "run", SMOKE);
    let cfg = cfg.to_str().unwrap();
    ok(&["gen-data", "-c", cfg]);
    let o = featalign(&["distill", "-c", cfg]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=missing_artifact "), "{err}");
    assert!(err.contains(&run.join("teacher").display().to_string()), "{err}");

    let o = featalign(&["eval", "-c", cfg, "--checkpoint", "/nonexistent/ckpt.bin"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_on_default_config_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("gc");
    let o = ok(&["gradcheck", "--seeds", "3", "--run-dir", run.to_str().unwrap()]);
    let out = stdout(&o);
    assert!(out.contains("max_rel_error=") && out.contains("PASS"), "{out}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join(pipeline::GRADCHECK_FILE)).unwrap()).unwrap();
    assert!(summary["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(run.join("config.json").exists());
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg_path, run) = setup(tmp.path(), "run", SMOKE);
    let cfg = cfg_path.to_str().unwrap();
    for cmd in ["gen-data", "train-teacher", "distill", "eval", "ablate"] {
        ok(&[cmd, "-c", cfg]);
    }
    let dir = RunDir::new(&run);
    for f in ["train.txt", "eval.txt", "prompts.txt", "references.txt", "manifest.json"] {
        assert!(dir.data().join(f).exists(), "{f}");
    }
    for d in [dir.teacher(), dir.student()] {
        for f in [pipeline::CHECKPOINT_FILE, pipeline::TRAIN_LOG_FILE, pipeline::EVAL_LOG_FILE, pipeline::METRICS_FILE] {
            assert!(d.join(f).exists(), "{}", d.join(f).display());
        }
    }

    // Flat metrics document.
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.student().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.as_object().unwrap().values().all(|v| v.is_number()));

    // The snapshot is the resolved config, byte for byte.
    let snapshot = fs::read_to_string(run.join("config.json")).unwrap();
    let resolved = RunConfig::load(&cfg_path).unwrap();
    assert_eq!(snapshot, resolved.to_json());
    assert_eq!(RunConfig::from_json(&snapshot).unwrap(), resolved);

    let report = fs::read_to_string(dir.ablation().join(pipeline::ABLATION_FILE)).unwrap();
    for arm in [ARM_SOFT_ONLY, ARM_FEATURE_ONLY, ARM_JOINT] {
        assert!(report.contains(&format!("\"{arm}\"")), "{arm}");
    }
    assert!(report.contains("Distillation Model Only"));
}

#[test]
fn snapshot_reproduces_the_run_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, run) = setup(tmp.path(), "a", SMOKE);
    for cmd in ["gen-data", "train-teacher", "distill"] {
        ok(&[cmd, "-c", cfg.to_str().unwrap()]);
    }
    // Rerun from the snapshot alone, elsewhere.
    let snapshot = run.join("config.json");
    let again = tmp.path().join("b");
    for cmd in ["gen-data", "train-teacher", "distill"] {
        ok(&[cmd, "-c", snapshot.to_str().unwrap(), "--run-dir", again.to_str().unwrap()]);
    }
    for f in ["student/train_log.csv", "student/checkpoint.bin", "teacher/checkpoint.bin", "data/train.txt"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_of_zero_weight_distillation_matches_untrained_student() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(SMOKE).unwrap();
    v["distillation"] = serde_json::json!({"alpha": 0, "beta": 0, "gamma": 0, "delta": 0});
    let (cfg_path, run) = setup(tmp.path(), "zero", &v.to_string());
    let cfg = cfg_path.to_str().unwrap();
    for cmd in ["gen-data", "train-teacher", "distill", "eval"] {
        ok(&[cmd, "-c", cfg]);
    }
    let reported = fs::read_to_string(RunDir::new(&run).student().join("metrics.json")).unwrap();

    let resolved = RunConfig::load(&cfg_path).unwrap();
    let data = pipeline::load_corpus(&resolved).unwrap();
    let teacher = pipeline::load_teacher(&resolved).unwrap();
    let untrained = pipeline::evaluate_initial_student(&resolved, &teacher, &data).unwrap();
    assert_eq!(reported, format!("{}\n", serde_json::to_string_pretty(&untrained).unwrap()));
}
