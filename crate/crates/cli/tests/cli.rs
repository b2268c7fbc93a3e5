use std::process::{Command, Output};

use serde_json::Value;

fn mixlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlab"))
        .args(args)
        .output()
        .unwrap()
}

fn mixlab_env(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlab"))
        .env("MIXLAB_THREADS", threads)
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn close(v: &Value, expected: f64, tol: f64) -> bool {
    (v.as_f64().unwrap() - expected).abs() <= tol
}

#[test]
fn solve_one_slot_symmetric() {
    let v = json(&mixlab(&[
        "solve",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.5",
        "--delay",
        "1",
    ]));
    let o = &v["outputs"];
    assert_eq!(v["schema_version"], 1);
    assert!(close(&o["anonymity"], 0.487744, 1e-6));
    assert_eq!(o["p_star"], 0.5);
    assert!(close(&o["d_star"], 1.0 / 3.0, 1e-12) && close(&o["r_star"], 1.0 / 3.0, 1e-12));
    assert_eq!(o["kkt"]["all_pass"], true);
    assert!(v.get("seed").is_none());
}

#[test]
fn solve_zero_delay() {
    let v = json(&mixlab(&[
        "solve",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.5",
        "--delay",
        "0",
    ]));
    assert_eq!(v["outputs"]["anonymity"], 0.25);
}

#[test]
fn solve_csv_has_stable_header() {
    let out = mixlab(&[
        "solve",
        "--lambda-r",
        "0.7",
        "--lambda-b",
        "0.2",
        "--format",
        "csv",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "lambda_r,lambda_b,delay,anonymity,w,phi_r,phi_b,phi_rb,p_star,d_star,r_star,iterations"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[4], "0.28028598544");
    assert_eq!(row[8], "0.586958012209");
}

#[test]
fn exit_codes() {
    let saturated = mixlab(&[
        "solve",
        "--lambda-r",
        "1",
        "--lambda-b",
        "1",
        "--delay",
        "1",
    ]);
    assert_eq!(saturated.status.code(), Some(2));
    assert!(saturated.stdout.is_empty());
    assert!(String::from_utf8_lossy(&saturated.stderr).contains("nonstationary"));

    let singular = mixlab(&["mix2", "analyze", "--lambda-r", "0.4", "--lambda-b", "0.4"]);
    assert_eq!(singular.status.code(), Some(2));

    assert_eq!(
        mixlab(&["solve", "--lambda-r", "0.5"]).status.code(),
        Some(1)
    );
    assert_eq!(
        mixlab(&["solve", "--lambda-r", "1.5", "--lambda-b", "0.1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        mixlab(&["fano", "--anonymity", "1.5"]).status.code(),
        Some(1)
    );
    assert_eq!(
        mixlab(&[
            "simulate",
            "--scenario",
            "mix2-hol",
            "--lambda-r",
            "0.5",
            "--lambda-b",
            "0.4"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(mixlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn fano_values() {
    let at = |a: &str| {
        json(&mixlab(&["fano", "--anonymity", a]))["outputs"]["error_lower_bound"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(at("1"), 0.5);
    assert_eq!(at("0"), 0.0);
    assert!((at("0.487744") - 0.106).abs() < 5e-4);
}

#[test]
fn mix2_analyze_examples() {
    let v = json(&mixlab(&[
        "mix2",
        "analyze",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.45",
    ]));
    let o = &v["outputs"];
    assert!(close(&o["rho"], 0.818182, 1e-6));
    assert_eq!(o["m_star"], 3);
    assert!(close(&o["mean_queue"], 3.4294, 1e-4));
    assert!(close(&o["drop_rate"], 0.05, 1e-12));

    let v = json(&mixlab(&[
        "mix2",
        "analyze",
        "--lambda-r",
        "0.6",
        "--lambda-b",
        "0.3",
    ]));
    assert_eq!(v["outputs"]["m_star"], 0);
}

#[test]
fn mix2_simulate_carries_seed() {
    let v = json(&mixlab(&[
        "mix2",
        "simulate",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.45",
        "--horizon",
        "100000",
        "--seed",
        "7",
    ]));
    assert_eq!(v["seed"], 7);
    assert_eq!(v["outputs"]["analysis"]["m_star"], 3);
    assert_eq!(v["outputs"]["report"]["violations"]["g_sync"], 0);

    let hol = json(&mixlab(&[
        "mix2",
        "simulate",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.5",
        "--horizon",
        "50000",
        "--T",
        "2",
    ]));
    assert!(hol["outputs"]["analysis"].is_null());
}

#[test]
fn simulate_examples() {
    let v = json(&mixlab(&[
        "simulate",
        "--scenario",
        "mix1-t1",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.5",
        "--horizon",
        "1000000",
        "--seed",
        "3",
    ]));
    assert!(close(&v["outputs"]["plugin_anonymity"], 0.4877, 0.01));

    let v = json(&mixlab(&[
        "simulate",
        "--scenario",
        "mix1-t0",
        "--lambda-r",
        "1",
        "--lambda-b",
        "1",
        "--horizon",
        "100000",
    ]));
    assert!(close(&v["outputs"]["plugin_anonymity"], 0.5, 1e-12));

    let v = json(&mixlab(&[
        "simulate",
        "--scenario",
        "mix2-threshold",
        "--lambda-r",
        "0",
        "--lambda-b",
        "0",
        "--m",
        "2",
        "--horizon",
        "10000",
    ]));
    for key in [
        "output_rate",
        "drop_rate",
        "mean_queue",
        "empirical_lambda_r",
    ] {
        assert_eq!(v["outputs"][key], 0.0, "{key}");
    }
}

#[test]
fn simulate_explicit_policy_and_initial_queue() {
    let v = json(&mixlab(&[
        "simulate",
        "--scenario",
        "mix1-t1",
        "--lambda-r",
        "1",
        "--lambda-b",
        "1",
        "--policy",
        "0.5,0.333333333333,0.333333333333",
        "--initial",
        "RB",
        "--horizon",
        "20000",
    ]));
    assert_eq!(v["outputs"]["plugin_anonymity"], 0.5);
    assert_eq!(v["inputs"]["scenario"]["initial"], "RB");
}

#[test]
fn trace_dump_writes_one_line_per_slot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let out = mixlab(&[
        "simulate",
        "--scenario",
        "mix1-general",
        "--delay",
        "2",
        "--lambda-r",
        "0.5",
        "--lambda-b",
        "0.5",
        "--horizon",
        "500",
        "--warmup",
        "10",
        "--dump-trace",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 500);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["schema_version"], 1);
    assert_eq!(first["buffer"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_rows_are_ordered_and_thread_independent() {
    let args = ["sweep", "--grid-r", "0.1:0.9:5", "--grid-b", "0.2:1:5"];
    let one = mixlab_env(&args, "1");
    let four = mixlab_env(&args, "4");
    assert!(one.status.success());
    assert_eq!(one.stdout, four.stdout);

    let mut reader = csv::Reader::from_reader(&one.stdout[..]);
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "lambda_r",
            "lambda_b",
            "anonymity",
            "w",
            "phi_r",
            "phi_b",
            "p_star",
            "d_star",
            "r_star",
            "iterations",
            "error"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 25);
    assert_eq!((&rows[0][0], &rows[0][1]), ("0.1", "0.2"));
    assert_eq!((&rows[1][0], &rows[1][1]), ("0.1", "0.4"));
    assert!(rows.iter().all(|r| r[10].is_empty()));

    assert_eq!(mixlab_env(&args, "zero").status.code(), Some(1));
}

#[test]
fn sweep_marks_saturated_cells() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.csv");
    let out = mixlab(&[
        "sweep",
        "--grid-r",
        "0.5:1:2",
        "--grid-b",
        "1:1:1",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_path(path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0][10].is_empty());
    assert!(rows[1][10].contains("nonstationary") && rows[1][2].is_empty());
}

#[test]
fn zero_delay_sweep() {
    let out = mixlab(&[
        "sweep", "--grid-r", "0:0.5:2", "--grid-b", "0:0.5:2", "--delay", "0",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[1].starts_with("0,0,,") && lines[1].contains("degenerate"));
    assert!(lines[4].starts_with("0.5,0.5,0.25,0.25,"));
}
