use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sot-bench"))
}

fn run_args(out: &Path, extra: &[&str]) -> Vec<String> {
    run_args_budget(out, 30, extra)
}

fn run_args_budget(out: &Path, budget: usize, extra: &[&str]) -> Vec<String> {
    let budget = budget.to_string();
    let mut v: Vec<String> = [
        "run",
        "--problem",
        "sphere",
        "--dim",
        "2",
        "--max-evals",
        &budget,
        "--trials",
        "2",
        "--seed",
        "9",
        "--num-cand",
        "50",
        "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.push(out.display().to_string());
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn run_emits_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trace.csv");
    let status = bin().args(run_args(&out, &[])).status().unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("trial,eval_index,t_start,t_end,worker,f,best_f"));
    assert!(text.lines().count() > 1);
    // without --dump-points there are no coordinate columns
    assert!(!text.lines().next().unwrap().contains("x0"));

    let status = bin()
        .args(run_args(&out, &["--dump-points"]))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().next().unwrap().ends_with("x0,x1"));
}

#[test]
fn speedup_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let serial = dir.path().join("serial.json");
    let par = dir.path().join("par.json");
    for (path, mode, workers) in
        [(&serial, "serial", "1"), (&par, "async", "4")]
    {
        let status = bin()
            .args(run_args(
                path,
                &["--format", "json", "--mode", mode, "--workers", workers, "--alpha", "102"],
            ))
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let report = dir.path().join("report.json");
    let status = bin()
        .args([
            "speedup",
            "--in",
            &format!("{},{}", serial.display(), par.display()),
            "--targets",
            "3",
            "--out",
            &report.display().to_string(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["targets"].as_array().unwrap().len(), 3);
    assert_eq!(parsed["configs"].as_array().unwrap().len(), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    // unknown problem
    let status = bin()
        .args([
            "run", "--problem", "nosuch", "--dim", "2", "--max-evals", "30", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // GP acquisition on the RBF surrogate
    let status = bin()
        .args(run_args(&out, &["--strategy", "ei", "--surrogate", "rbf"]))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // budget below the minimum design size
    let status = bin()
        .args(run_args_budget(&out, 2, &[]))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    // speedup with a single configuration
    let trace = dir.path().join("t.json");
    let status = bin()
        .args(run_args(&trace, &["--format", "json"]))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = bin()
        .args([
            "speedup",
            "--in",
            &trace.display().to_string(),
            "--targets",
            "2",
            "--out",
        ])
        .arg(dir.path().join("r.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    // unreadable input path for speedup
    let status = bin()
        .args([
            "speedup",
            "--in",
            "/nonexistent/trace.json",
            "--targets",
            "2",
            "--out",
            "/tmp/r.json",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    // unwritable output path for run
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing-dir").join("t.csv");
    let status = bin().args(run_args(&out, &[])).status().unwrap();
    assert_eq!(status.code(), Some(3));
}
