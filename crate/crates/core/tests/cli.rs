use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collective-cbf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const ONE_AGENT: &str = "n_agents = 1\nstarts = [[-1.0, 0.3]]\ngoals = [[1.0, -0.3]]\nobstacles = [{ center = [0.0, 0.0], radius = 0.2 }]\nt_max = 50\n";

#[test]
fn validate_bundled_and_broken() {
    let out = cli(&["validate", "--scenario", "multi-obstacle"]);
    assert_eq!(out.status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "n_agents = 2\nstarts = [[0.0, 0.0], [0.1, 0.0]]\ngoals = [[1.0, 0.0], [2.0, 0.0]]\ndelta_o = 0.1\n",
    );
    let out = cli(&["validate", "--scenario", &bad]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("C2 ordering"), "{text}");
    assert!(text.contains("initial state not interior"), "{text}");
}

#[test]
fn run_writes_episode_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = cli(&[
        "run",
        "--scenario",
        "single-obstacle",
        "--out",
        out_dir.to_str().unwrap(),
        "--timing",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "trajectory.csv",
        "controls.csv",
        "cbf.csv",
        "summary.json",
        "timing.json",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["safe"], true);
    assert_eq!(summary["status"], "reached");
}

#[test]
fn run_batch_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("batch");
    let out = cli(&[
        "run",
        "--scenario",
        "multi-obstacle",
        "--runs",
        "3",
        "--seed",
        "40",
        "--beta",
        "0.5",
        "--scheme",
        "lse",
        "--horizon",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    let seeds: Vec<&str> = runs
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(seeds, ["40", "41", "42"]);
    assert!(out_dir.join("envelope.csv").exists());
    assert!(!out_dir.join("timing.json").exists());
}

#[test]
fn exit_code_for_safety_violation() {
    // gamma^3 dt > 1 lets a single Euler step overshoot the boundary.
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "coarse.toml",
        &format!("{ONE_AGENT}dt = 0.3\ngamma = 2.0\nsigma_w = [1e-8, 1e-8]\n"),
    );
    let out = cli(&[
        "run",
        "--scenario",
        &path,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_code_for_infeasibility() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "tight.toml",
        "n_agents = 1\nstarts = [[0.26, 0.0]]\ngoals = [[-1.0, 0.0]]\nobstacles = [{ center = [0.0, 0.0], radius = 0.1 }]\nu_max = 0.001\n",
    );
    let out = cli(&[
        "run",
        "--scenario",
        &path,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exit_code_for_config_errors() {
    let out = cli(&["run", "--scenario", "no-such-scenario"]);
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "s.toml", ONE_AGENT);
    let out = cli(&[
        "run",
        "--scenario",
        &path,
        "--k",
        "1",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k >= 2"));
}

#[test]
fn json_scenarios_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "s.json",
        r#"{"n_agents": 1, "starts": [[-1.0, 0.3]], "goals": [[1.0, -0.3]], "obstacles": [{"center": [0.0, 0.0], "radius": 0.2}], "t_max": 40}"#,
    );
    let out = cli(&["validate", "--scenario", &path]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn verify_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "verify",
        "--samples",
        "200",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["lemma1_closed_form_constant"], 0.625);
    assert_eq!(report["lemma1"].as_array().unwrap().len(), 3);
    assert_eq!(report["qp"]["status_mismatches"], 0);
    assert!(report["monitor_identity_alpha"]["pass_rate"].is_number());
}
