use std::path::Path;
use std::process::Command;

fn run(dir: &Path, config: &str, extra: &[&str]) -> (i32, String) {
    let cfg = dir.join("exp.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crofton"))
        .arg("--config")
        .arg(&cfg)
        .args(extra)
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn circle_defaults_write_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let (code, err) = run(tmp.path(), "experiment = \"circle\"\n", &["--output", out.to_str().unwrap(), "--threads", "2"]);
    assert_eq!(code, 0, "{err}");
    for f in ["samples.csv", "histogram.csv", "summary.json", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let mean = s["report"]["mean_traditional"].as_f64().unwrap();
    assert!((mean - 2.0 * std::f64::consts::PI).abs() < 0.02 * 2.0 * std::f64::consts::PI);
    for key in ["seed", "config_hash", "wall_clock_seconds", "weight_variance", "counters", "config"] {
        assert!(!s[key].is_null(), "{key}");
    }
    assert_eq!(s["config"].as_str().unwrap(), "experiment = \"circle\"\n");
}

#[test]
fn seed_flag_overrides_and_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "experiment = \"sphere_collection\"\nseed = 1\n[sphere_collection]\nsamples = 2000\nn_spheres = 5\n";
    let dirs: Vec<_> = (0..3).map(|i| tmp.path().join(format!("o{i}"))).collect();
    assert_eq!(run(tmp.path(), cfg, &["--output", dirs[0].to_str().unwrap()]).0, 0);
    assert_eq!(run(tmp.path(), cfg, &["--output", dirs[1].to_str().unwrap(), "--threads", "3"]).0, 0);
    assert_eq!(run(tmp.path(), cfg, &["--output", dirs[2].to_str().unwrap(), "--seed", "2"]).0, 0);
    let read = |d: &Path| std::fs::read(d.join("samples.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
    assert_ne!(read(&dirs[0]), read(&dirs[2]));
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let (code, err) = run(tmp.path(), "experiment = \"circle\"\n[circle]\nsamples = \"many\"\n", &["--output", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("\"error\":\"config\""));
    assert!(!out.exists());
    let (code, _) = run(tmp.path(), "experiment = \"nonsense\"\n", &["--output", out.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(!out.exists());
}

#[test]
fn failed_estimation_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = "experiment = \"airy_single\"\n[airy_single]\nn_parameter = 1000.0\ni_max = 2\nvalues = [0.0]\ncontrol_value = -1.0\ncontrol_samples = 1\nrejection_draws = 10\nrejection_halfwidth = 1e-9\n";
    let (code, err) = run(tmp.path(), cfg, &["--output", out.to_str().unwrap()]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("\"error\":\"numerical\""));
    assert!(!out.exists());
}

#[test]
fn stalled_run_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = "experiment = \"airy_single\"\n[airy_single]\nn_parameter = 1000.0\ni_max = 20\nd = 2\nvalues = [8.0]\ncontrol_samples = 1\n[airy_single.solver]\nmax_restarts = 1\nmax_iters = 5\n";
    let (code, err) = run(tmp.path(), cfg, &["--output", out.to_str().unwrap()]);
    assert_eq!(code, 4, "{err}");
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["invalid"], true);
}
