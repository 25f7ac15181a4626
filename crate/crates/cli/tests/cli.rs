use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dfsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfsense"))
        .args(args)
        .env_remove("DFSENSE_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

const PIPELINE: &str = "\
[experiment]
seed = 3

[scenario]
region = 200.0
bs = [[-80.0, -80.0], [80.0, -80.0], [80.0, 80.0], [-80.0, 80.0]]
targets = [[-20.0, 10.0], [35.0, -40.0]]
";

#[test]
fn ghosts_reports_the_example_pair() {
    let o = dfsense(&["ghosts", "--config", &cfg("example1.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("ghost detected, tau=2"), "{text}");
    for p in ["(2.000000, -2.000000)", "(-2.000000, 2.000000)", "(-2.000000, -2.000000)", "(2.000000, 2.000000)"] {
        assert!(text.contains(p), "{p} missing from\n{text}");
    }
}

#[test]
fn ghosts_reports_a_unique_solution() {
    let o = dfsense(&["ghosts", "-c", &cfg("example2.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("no ghost, tau=1"), "{}", stdout(&o));
}

#[test]
fn theorem2_experiment_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t2");
    let o = dfsense(&[
        "experiment",
        "--kind",
        "theorem2",
        "--trials",
        "1000",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = stdout(&o);
    assert!(csv.starts_with("curve,K,error_prob,ci_low,ci_high,trials,degenerate\n"), "{csv}");
    assert_eq!(csv.lines().count(), 5);
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 0.0, "{line}");
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0, "{line}");
    }
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), csv);
    assert!(out.join("plot.csv").exists());
    assert!(out.join("config.toml").exists());
    assert!(!out.join("failures.txt").exists());
    let echo = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("seed = 7"), "{echo}");
}

#[test]
fn missing_config_is_a_config_error() {
    let o = dfsense(&["range", "--config", "/nonexistent/dir/nope.toml"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/nonexistent/dir/nope.toml"), "{}", stderr(&o));
}

#[test]
fn shipped_configs_validate() {
    for name in ["example1.toml", "example2.toml", "range-error.toml", "localization-100mhz.toml", "localization-400mhz.toml", "theorem1.toml", "theorem2.toml", "lemma1.toml"] {
        let o = dfsense(&["validate", &cfg(name)]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        assert!(stdout(&o).contains(": valid ("), "{}", stdout(&o));
    }
}

#[test]
fn too_many_taps_is_rejected() {
    let o = dfsense(&["validate", &cfg("range-error.toml"), "--set", "ofdm.max_paths=900"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("L must be < Q"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_bad_type_are_config_errors() {
    let a = dfsense(&["validate", &cfg("range-error.toml"), "--set", "ofdm.bogus=1"]);
    assert_eq!(a.status.code(), Some(3), "{}", stderr(&a));
    let b = dfsense(&["validate", &cfg("range-error.toml"), "--set", "experiment.trials=\"many\""]);
    assert_eq!(b.status.code(), Some(3), "{}", stderr(&b));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(dfsense(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dfsense(&[]).status.code(), Some(2));
}

#[test]
fn range_then_localize_recovers_the_targets() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pipeline.toml");
    std::fs::write(&config, PIPELINE).unwrap();
    let out = dir.path().join("run");
    let r = dfsense(&["range", "-c", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    let ranges = out.join("ranges.csv");
    assert_eq!(std::fs::read_to_string(&ranges).unwrap(), stdout(&r));
    assert!(out.join("scenario.txt").exists());

    let l = dfsense(&["localize", "-c", config.to_str().unwrap(), "--ranges", ranges.to_str().unwrap()]);
    assert_eq!(l.status.code(), Some(0), "{}", stderr(&l));
    let csv = stdout(&l);
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|line| line.split(',').take(6).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2, "{csv}");
    for r in rows {
        let err = (r[2] - r[4]).hypot(r[3] - r[5]);
        assert!(err < 2.5, "target off by {err} m\n{csv}");
    }
}

#[test]
fn seed_and_overrides_control_the_run() {
    let run = |seed: &str, extra: &[&str]| {
        let mut args = vec!["experiment", "--kind", "localization-error", "--seed", seed, "--set", "experiment.trials=20", "--set", "experiment.k_max=3"];
        args.extend_from_slice(extra);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        args.extend_from_slice(&["--out", out.to_str().unwrap()]);
        let o = dfsense(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let a = run("5", &[]);
    assert_eq!(a, run("5", &[]));
    assert_eq!(a.lines().count(), 1 + 2 * 3);
    let narrowed = run("5", &["--set", "localization.range_model=\"true\""]);
    assert_eq!(narrowed.lines().count(), 1 + 2);
    assert!(narrowed.lines().skip(1).all(|l| l.starts_with("true-range,")));
}
