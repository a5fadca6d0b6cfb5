use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn srsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srsm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{"tau": 0.05, "hidden": [8, 8], "seed_points_per_dim": 10, "noise_cells_per_dim": 2,
            "train": {"epochs_per_iter": 1}, "ppo": {"iterations": 1, "episodes": 2, "horizon": 20}}"#,
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&srsm(&["--help"])), 0);
    let v = srsm(&["--version"]);
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn bad_usage_and_missing_files_exit_one() {
    assert_eq!(code(&srsm(&["synthesize", "--no-such-flag"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = srsm(&["synthesize", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
    let out = srsm(&["bounds", "--certificate", s(&missing)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn timeout_exits_two_and_keeps_the_last_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = srsm(&[
        "synthesize",
        "--config",
        s(&cfg),
        "--env-spec",
        s(&data("toy.json")),
        "--out",
        s(&out_dir),
        "--timeout",
        "1",
        "--max-iterations",
        "1000",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let last: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("last_state.json")).unwrap()).unwrap();
    for key in ["iteration", "policy", "V", "buffer"] {
        assert!(last.get(key).is_some(), "missing {key}");
    }
    assert!(out_dir.join("config.json").exists());
    assert!(!out_dir.join("certificate.json").exists());
}

#[test]
fn failed_verification_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("verify");
    let out = srsm(&[
        "verify",
        "--config",
        s(&cfg),
        "--env-spec",
        s(&data("toy.json")),
        "--policy",
        s(&data("toy_policy.json")),
        "--out",
        s(&out_dir),
        "--max-iterations",
        "1",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("verify_report.json").exists());
    assert!(out_dir.join("iterations.json").exists());
}

#[test]
fn simulate_with_no_trajectories() {
    let out = srsm(&[
        "simulate",
        "--certificate",
        s(&data("toy_certificate.json")),
        "--env-spec",
        s(&data("toy.json")),
        "--no-recheck",
        "--n",
        "0",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["trajectories"], 0);
    assert_eq!(summary["mean_out"], 0.0);
    assert_eq!(summary["tail_fraction"], 1.0);
}

#[test]
fn simulate_reports_mean_out_within_the_bound() {
    let out = srsm(&[
        "simulate",
        "--certificate",
        s(&data("toy_certificate.json")),
        "--env-spec",
        s(&data("toy.json")),
        "--no-recheck",
        "--x0=0.9,0.9",
        "--n",
        "200",
        "--horizon",
        "300",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mean = summary["mean_out"].as_f64().unwrap();
    assert!(mean >= 1.0);
    assert!(mean <= summary["expected_out_bound"].as_f64().unwrap());
}

#[test]
fn export_writes_one_row_per_point_and_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = srsm(&[
        "export",
        "--certificate",
        s(&data("toy_certificate.json")),
        "--env-spec",
        s(&data("toy.json")),
        "--no-recheck",
        "--out",
        s(dir.path()),
        "--resolution",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let lattice = std::fs::read_to_string(dir.path().join("value_lattice.csv")).unwrap();
    let mask = std::fs::read_to_string(dir.path().join("sublevel_mask.csv")).unwrap();
    assert_eq!(lattice.lines().next().unwrap(), "x1,x2,V,expected_out_bound");
    assert_eq!(lattice.lines().count(), 1 + 100);
    assert_eq!(mask.lines().next().unwrap(), "x1,x2,V_lo,V_hi,sublevel");
    assert_eq!(mask.lines().count(), 1 + 100);
}

#[test]
fn bounds_rejects_a_state_outside_the_space() {
    let out = srsm(&[
        "bounds",
        "--certificate",
        s(&data("toy_certificate.json")),
        "--env-spec",
        s(&data("toy.json")),
        "--no-recheck",
        "--x0=3,0",
    ]);
    assert_eq!(code(&out), 1);
    let ok = srsm(&[
        "bounds",
        "--certificate",
        s(&data("toy_certificate.json")),
        "--env-spec",
        s(&data("toy.json")),
        "--no-recheck",
    ]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("E[Out] <="));
}
