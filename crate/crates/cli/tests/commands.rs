//! Command-level behaviour through `lobrl_cli::run`, plus one binary smoke test.

use std::path::Path;

use lobrl_cli::pipeline::{ReportFile, RunManifest};

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["lobrl", "--quiet"];
    full.extend_from_slice(args);
    lobrl_cli::run(full)
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        r#"
instrument = "TINY"

[data.synthetic]
n_events = 4000

[forecaster]
hidden = [8]
max_epochs = 3

[agent]
updates = 3
group_size = 2
hidden = [8]
"#,
    )
    .unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_commands_write_the_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let common = ["--config", s(&cfg), "--out", s(&out), "--seed", "4"];
    let stage = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend_from_slice(&common);
        a.extend_from_slice(extra);
        run(&a)
    };

    // Later stages refuse to run before their inputs exist.
    assert_eq!(stage("train-forecaster", &[]), 2);
    assert_eq!(stage("prepare", &[]), 0);
    for f in ["orderbook.csv", "timestamps.csv", "features.csv", "targets.csv", "split.json", "meta.json"] {
        assert!(out.join("data").join(f).exists(), "{f}");
    }
    assert_eq!(stage("train-agent", &["--agent", "ppo"]), 2);
    assert_eq!(stage("train-forecaster", &[]), 0);
    assert_eq!(stage("train-agent", &["--agent", "ppo,qtable"]), 0);
    assert!(out.join("agents/ppo/policy.json").exists());
    assert!(out.join("agents/ppo/value.json").exists());
    assert!(out.join("agents/qtable/qtable.txt").exists());
    assert_eq!(stage("backtest", &["--agent", "ppo,qtable"]), 0);
    for f in ["report.json", "equity.csv", "histogram.csv", "episode_returns.csv", "drawdown.csv"] {
        assert!(out.join("backtest/ppo").join(f).exists(), "{f}");
    }

    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest.stages["train-forecaster"].notes.contains_key("best_epoch"));
    assert!(manifest.stages.contains_key("backtest/qtable"));
    let resolved = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("instrument = \"TINY\""));
    assert!(resolved.contains("seed = 4"));

    let report: ReportFile =
        serde_json::from_str(&std::fs::read_to_string(out.join("backtest/ppo/report.json")).unwrap()).unwrap();
    assert_eq!(report.report.method, "PPO");
    assert_eq!(report.config_fingerprint, manifest.config_fingerprint);

    // Two reports present, two absent: lenient compare lists them, strict fails.
    assert_eq!(stage("compare", &[]), 0);
    let md = std::fs::read_to_string(out.join("compare.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| TINY")).count(), 2);
    assert_eq!(md.lines().filter(|l| l.starts_with("absent:")).count(), 2);
    assert_eq!(stage("compare", &["--strict"]), 2);

    // A changed forecaster config invalidates downstream artifacts.
    let other = dir.path().join("other.toml");
    std::fs::write(
        &other,
        std::fs::read_to_string(&cfg).unwrap().replace("max_epochs = 3", "max_epochs = 2"),
    )
    .unwrap();
    assert_eq!(run(&["backtest", "--config", s(&other), "--out", s(&out), "--seed", "4", "--agent", "ppo"]), 2);
    // So does a different seed, which changes the data fingerprint.
    assert_eq!(run(&["backtest", "--config", s(&cfg), "--out", s(&out), "--seed", "5", "--agent", "ppo"]), 2);
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["prepare", "--agent", "dqn"]), 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "not_a_key = 1\n").unwrap();
    assert_eq!(run(&["prepare", "--config", s(&bad)]), 1);

    let missing = dir.path().join("lobster.toml");
    std::fs::write(
        &missing,
        "[data]\nsource = \"lobster\"\norderbook = \"/definitely/not/here.csv\"\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    assert_eq!(run(&["prepare", "--config", s(&missing), "--out", s(&out)]), 2);
}

#[test]
fn lobster_input_with_rejections_beyond_threshold_fails() {
    let dir = tempfile::tempdir().unwrap();
    let book = dir.path().join("book.csv");
    let msgs = dir.path().join("msgs.csv");
    assert_eq!(
        run(&["synth", "--output", s(&book), "--messages", s(&msgs), "--n-events", "3000", "--seed", "2"]),
        0
    );
    let cfg_path = dir.path().join("lobster.toml");
    let write_cfg = |threshold: f64| {
        std::fs::write(
            &cfg_path,
            format!(
                "instrument = \"GOOG\"\n[data]\nsource = \"lobster\"\norderbook = \"{}\"\nmessages = \"{}\"\nmax_rejected_fraction = {threshold}\n",
                book.display(),
                msgs.display()
            ),
        )
        .unwrap();
    };
    let out = dir.path().join("run");
    write_cfg(0.01);
    assert_eq!(run(&["prepare", "--config", s(&cfg_path), "--out", s(&out)]), 0);
    let ts = std::fs::read_to_string(out.join("data/timestamps.csv")).unwrap();
    assert_ne!(ts.lines().nth(1), Some("0"), "timestamps come from the message file");

    // Corrupt 5% of the rows; the default 1% threshold rejects the file.
    let text = std::fs::read_to_string(&book).unwrap();
    let corrupted: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i % 20 == 7 { "x,y".to_string() } else { l.to_string() })
        .collect();
    std::fs::write(&book, corrupted.join("\n")).unwrap();
    // Message rows no longer line up one-to-one; drop them for this check.
    std::fs::write(
        &cfg_path,
        format!("[data]\nsource = \"lobster\"\norderbook = \"{}\"\n", book.display()),
    )
    .unwrap();
    assert_eq!(run(&["prepare", "--config", s(&cfg_path), "--out", s(&out)]), 2);
    std::fs::write(
        &cfg_path,
        format!(
            "[data]\nsource = \"lobster\"\norderbook = \"{}\"\nmax_rejected_fraction = 0.1\n",
            book.display()
        ),
    )
    .unwrap();
    assert_eq!(run(&["prepare", "--config", s(&cfg_path), "--out", s(&out)]), 0);
}

#[test]
fn prepare_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        assert_eq!(run(&["prepare", "--config", s(&cfg), "--out", s(&out)]), 0);
        let read = |f: &str| std::fs::read(out.join("data").join(f)).unwrap();
        files.push((read("features.csv"), read("targets.csv"), read("meta.json")));
    }
    assert!(files[0] == files[1]);
}

#[test]
fn binary_reports_version_and_usage_errors() {
    let bin = env!("CARGO_BIN_EXE_lobrl");
    let ok = std::process::Command::new(bin).arg("--version").output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("lobrl "));
    let bad = std::process::Command::new(bin).arg("--bogus").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
