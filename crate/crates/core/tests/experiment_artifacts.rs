use std::fs;

use lodadac::experiment::{parse_config, report, run_experiments, RunStatus, Summary};
use lodadac::Error;

const GRID: &str = r#"{
    "problem": {"kind": "logistic", "d": 10, "agents": 4, "samples_per_agent": 40},
    "optimizer": {"kind": "adam", "alpha": 0.01},
    "topology": {"kind": "ring"},
    "iterations": 60,
    "batch": 4,
    "seed": 5,
    "grid": {"local_steps": [1, 10], "top_k": [null, 0.3]}
}"#;

#[test]
fn grid_writes_artifacts_and_echo_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("grid.json");
    fs::write(&cfg_path, GRID).unwrap();
    let config = parse_config(&cfg_path).unwrap();
    let out = dir.path().join("out");
    let outcome = run_experiments(&config, Some(&out)).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let summary = Summary::load(out.join("summary.json")).unwrap();
    assert_eq!(summary.runs.len(), 4);
    assert!(summary.runs.iter().all(|r| r.status == RunStatus::Ok));

    let table = report(std::slice::from_ref(&summary)).unwrap();
    let lean = table.lines().find(|l| l.contains("_K10_topk0.3_")).unwrap();
    assert!(lean.trim_end().ends_with("0.0450"), "{lean}");

    // Rerunning a config echo reproduces its CSV byte for byte.
    let first = &summary.runs[3];
    let echo = out.join(format!("{}.config.json", first.name));
    let again = tempfile::tempdir().unwrap();
    let echoed = parse_config(&echo).unwrap();
    assert!(echoed.grid.is_none());
    run_experiments(&echoed, Some(again.path())).unwrap();
    let a = fs::read(out.join(first.csv.as_ref().unwrap())).unwrap();
    let rerun: Vec<_> = fs::read_dir(again.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    assert_eq!(rerun.len(), 1);
    assert_eq!(fs::read(&rerun[0]).unwrap(), a);
}

#[test]
fn theory_violation_is_recorded_and_others_continue() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{
        "problem": {"kind": "least_squares", "d": 4, "agents": 4, "samples_per_agent": 10, "clip": 1.0},
        "optimizer": {"kind": "adam", "alpha": 0.0001},
        "topology": {"kind": "ring"},
        "rounds": 5,
        "gamma": 0.5,
        "theory_mode": "strict",
        "grid": {"agents": [4, 9], "topology": ["ring", "complete"]}
    }"#;
    let path = dir.path().join("c.json");
    fs::write(&path, text).unwrap();
    let config = parse_config(&path).unwrap();
    let outcome = run_experiments(&config, Some(dir.path())).unwrap();
    assert_eq!(outcome.summary.runs.len(), 4);
    // gamma 0.5 is above the ceiling on every graph here.
    assert!(outcome.summary.runs.iter().all(|r| r.status == RunStatus::TheoryViolation));
    assert_eq!(outcome.exit_code(), 3);
}

#[test]
fn custom_topology_from_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("star.txt"), "0 1\n0 2\n0 3\n").unwrap();
    let text = r#"{
        "problem": {"kind": "least_squares", "d": 3, "agents": 4, "samples_per_agent": 10},
        "optimizer": {"kind": "amsgrad", "alpha": 0.01},
        "topology": {"kind": "custom", "edges_file": "star.txt"},
        "rounds": 3
    }"#;
    let path = dir.path().join("c.json");
    fs::write(&path, text).unwrap();
    let config = parse_config(&path).unwrap();
    let outcome = run_experiments(&config, Some(&dir.path().join("o"))).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let echo = fs::read_to_string(dir.path().join("o").join(format!("{}.config.json", outcome.summary.runs[0].name))).unwrap();
    assert!(echo.contains("\"edges\""));
    assert!(!echo.contains("edges_file"));
}

#[test]
fn config_errors_carry_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"problem": {"kind": "logistic", "d": 4, "agents": 4, "samples_per_agent": 5}, "optimizer": {"kind": "adam", "alpha": 0.1}, "topology": {"kind": "grid2d"}, "grid": {"agents": [4, 5]}}"#, "topology"),
        (r#"{"problem": {"kind": "logistic", "d": 4, "agents": 4, "samples_per_agent": 5}, "optimizer": {"kind": "adam", "alpha": 0.1}, "topology": {"kind": "ring"}, "compressor": {"kind": "top_k", "fraction": 1.5}}"#, "compressor.fraction"),
        (r#"{"problem": {"kind": "logistic", "d": 4, "agents": 4, "samples_per_agent": 5}, "optimizer": {"kind": "adam", "alpha": 0.1}, "topology": {"kind": "ring"}, "extra": 1}"#, "extra"),
        (r#"{"problem": {"kind": "logistic", "d": 4, "agents": 1, "samples_per_agent": 5}, "optimizer": {"kind": "adam", "alpha": 0.1}, "topology": {"kind": "ring"}}"#, "problem.agents"),
        (r#"{"problem": {"kind": "logistic", "d": 4, "agents": 4, "samples_per_agent": 5}, "optimizer": {"kind": "adamw", "alpha": 0.1}, "topology": {"kind": "ring"}}"#, "optimizer.kind"),
    ];
    for (i, (text, want)) in cases.iter().enumerate() {
        let path = dir.path().join(format!("c{i}.json"));
        fs::write(&path, text).unwrap();
        match parse_config(&path) {
            Err(Error::Config { path, message }) => assert_eq!(&path, want, "case {i}: {message}"),
            other => panic!("case {i}: {other:?}"),
        }
    }
}
