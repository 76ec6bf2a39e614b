use std::fs;
use std::path::Path;

use assert_cmd::Command;

const TINY: &str = r#"
seeds = [0]

[data]
source = "synthetic"
[data.synth]
stocks = 10
market_vol = 0.0
segments = [{ regime = "momentum", coef = 0.6, length = 150 }]

[backbone]
d_model = 8
layers = 1
d_ff = 8
heads = 4

[teachers]
epochs = 1
lr = 0.003

[distill]
total_epochs = 2
swa_epochs = 1
lr = 0.003
"#;

fn tips(dir: &Path) -> Command {
    let mut cmd = Command::cargo_bin("tips").unwrap();
    cmd.current_dir(dir);
    cmd
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn synth_summary(dir: &Path, out: &str) -> serde_json::Value {
    let o = tips(dir)
        .args(["-c", "tiny.toml", "-o", out, "synth"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn synth_is_reproducible_and_trends() {
    let dir = setup();
    let a = synth_summary(dir.path(), "a");
    let b = synth_summary(dir.path(), "b");
    assert_eq!(a, b);
    assert!(a["lag1_autocorr"].as_f64().unwrap() > 0.0);
    assert_eq!(
        fs::read(dir.path().join("a/panel.bin")).unwrap(),
        fs::read(dir.path().join("b/panel.bin")).unwrap()
    );
}

#[test]
fn bad_input_exit_codes() {
    let dir = setup();
    // Unknown flag and invalid values are configuration errors.
    tips(dir.path()).args(["synth", "--bogus"]).assert().code(1);
    tips(dir.path())
        .args(["-c", "tiny.toml", "backtest", "--costs", "free-lunch"])
        .assert()
        .code(1);
    tips(dir.path())
        .args(["-c", "missing.toml", "synth"])
        .assert()
        .code(1);
    // Unreadable market data is a data error.
    fs::write(
        dir.path().join("bad.csv"),
        "date,symbol,open,high,low,close,volume\n2020-01-02,AAA,1,1,1,-4,10\n",
    )
    .unwrap();
    tips(dir.path())
        .args(["-o", "csv", "ingest", "bad.csv"])
        .assert()
        .code(2);
    // Distilling before training names the absent teacher.
    tips(dir.path())
        .args(["-c", "tiny.toml", "synth"])
        .assert()
        .success();
    let o = tips(dir.path())
        .args(["-c", "tiny.toml", "distill"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("teacher checkpoint"));
    tips(dir.path()).arg("--help").assert().success();
}

#[test]
fn stages_chain_and_resume() {
    let dir = setup();
    let run = |args: &[&str]| {
        let o = tips(dir.path())
            .args(["-c", "tiny.toml"])
            .args(args)
            .output()
            .unwrap();
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["synth"]);
    let first = run(&["train-teachers", "--subset", "causality,vanilla"]);
    assert!(first.contains("trained [past,future,vanilla]"), "{first}");
    let again = run(&["train-teachers", "--subset", "causality,vanilla"]);
    assert!(
        again.contains("trained [] reused [past,future,vanilla]"),
        "{again}"
    );
    run(&["distill", "--subset", "causality,vanilla"]);
    let bt = run(&[
        "backtest",
        "--subset",
        "causality,vanilla",
        "--costs",
        "csi",
    ]);
    assert!(bt.contains("tips-causality-vanilla"), "{bt}");
    run(&["backtest", "--subset", "causality,vanilla", "--ensemble"]);
    let report = run(&["report"]);
    assert!(report.contains("ensemble"), "{report}");
    assert!(dir
        .path()
        .join("runs/seed-0/backtest/ensemble.csv")
        .exists());
}
