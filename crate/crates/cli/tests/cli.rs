use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"
[train]
epochs = 4
seed = 11

[model]
blocks = 2
channels = [4, 6]
q_steps = 16

[data]
synthetic = true
samples = 96
classes = 2
"#;

fn bitspike(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitspike"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn trained(dir: &TempDir) {
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let out = bitspike(dir.path(), &["train", "--config", "run.toml", "--out", "ann.sfrg"]);
    assert_eq!(code(&out), 0, "{out:?}");
}

#[test]
fn missing_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = bitspike(dir.path(), &["train", "--config", "absent.toml", "--out", "m.sfrg"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("q_steps = 16", "q_steps = 12")).unwrap();
    let out = bitspike(dir.path(), &["train", "--config", "bad.toml", "--out", "m.sfrg"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = CONFIG.replace("seed = 11", "seed = 11\nlr = 1e30");
    std::fs::write(dir.path().join("hot.toml"), cfg).unwrap();
    let out = bitspike(dir.path(), &["train", "--config", "hot.toml", "--out", "m.sfrg"]);
    assert_eq!(code(&out), 3, "{out:?}");
}

#[test]
fn training_is_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    trained(&a);
    trained(&b);
    let read = |d: &TempDir| std::fs::read(d.path().join("ann.sfrg")).unwrap();
    assert_eq!(read(&a), read(&b));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("ann.sfrg.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["model"]["channels"], serde_json::json!([4, 6]));
}

#[test]
fn pipeline_convert_verify_infer_analyze() {
    let dir = TempDir::new().unwrap();
    trained(&dir);
    let d = dir.path();

    let out = bitspike(d, &["convert", "--model", "ann.sfrg", "--timesteps", "4", "--out", "snn4.sfrg"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let manifest = std::fs::read_to_string(d.join("snn4.sfrg.manifest.json")).unwrap();
    assert!(manifest.contains("exact mode"));

    let out = bitspike(d, &["verify", "--ann", "ann.sfrg", "--snn", "snn4.sfrg", "--samples", "8", "--report", "v.json"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("v.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["report"]["max_deviation"].as_f64().unwrap() <= 1e-4);

    let out = bitspike(d, &["convert", "--model", "ann.sfrg", "--timesteps", "2", "--out", "snn2.sfrg"]);
    assert_eq!(code(&out), 0);
    let out = bitspike(d, &["verify", "--ann", "ann.sfrg", "--snn", "snn2.sfrg", "--samples", "8"]);
    assert_eq!(code(&out), 4);
    assert!(stdout(&out).contains("FAIL"));

    let out = bitspike(d, &["convert", "--model", "ann.sfrg", "--timesteps", "3", "--exact", "--out", "x.sfrg"]);
    assert_eq!(code(&out), 2);

    let out = bitspike(d, &["infer", "--model", "snn4.sfrg", "--input", "synthetic", "--samples", "16", "--dump-spikes", "spikes"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(d.join("spikes/layer00.spk").exists());
    let out = bitspike(d, &["infer", "--model", "snn4.sfrg", "--input", "synthetic", "--scheduler", "step-by-step"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer_by_layer"));

    let out = bitspike(d, &["analyze", "--model", "ann.sfrg", "--samples", "32", "--sweep", "--report", "a.json"]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = std::fs::read_to_string(d.join("a.json")).unwrap();
    let report = bitspike::analyze::AnalysisReport::from_json(&text).unwrap();
    assert_eq!(report.sweep.len(), 4);
    assert_eq!(report.energy.width, 32);
}
