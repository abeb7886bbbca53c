use std::process::Command;

fn dynheat() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynheat"))
}

#[test]
fn operator_norm_suite_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let status = dynheat()
        .args([
            "verify",
            "operator-norm",
            "--dim",
            "3",
            "--q",
            "1",
            "--r",
            "inf",
            "--output",
        ])
        .arg(&path)
        .env("DYNHEAT_THREADS", "1")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["config"]["command"]["Verify"]["r"], "inf");
    let small = report["details"]["small_t_slope"].as_f64().unwrap();
    let large = report["details"]["large_t_slope"].as_f64().unwrap();
    assert!((small + 2.0).abs() <= 0.1 && (large + 1.5).abs() <= 0.1);
}

#[test]
fn exit_codes() {
    let usage = dynheat().args(["fujita", "--delta", "1e-2"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(64));
    let bad = dynheat()
        .args(["kernel", "eval", "--a", "1", "--b", "1", "--t", "0"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("t must be finite and > 0"));
    let ok = dynheat()
        .args(["kernel", "eval", "--a", "1", "--b", "1", "--t", "1"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn thread_count_does_not_change_output() {
    let run = |threads: &str| {
        dynheat()
            .args(["verify", "sandwich", "--dim", "2", "--samples", "100", "--seed", "4"])
            .env("DYNHEAT_THREADS", threads)
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(run("1"), run("3"));
}
