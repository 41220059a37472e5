use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
        .display()
        .to_string()
}

fn hybridsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridsync"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json report")
}

#[test]
fn missing_cluster_file_exits_2_without_report() {
    let out = hybridsync(&[
        "estimate",
        "--graph",
        &fixture("lm.json"),
        "--cluster",
        "/nonexistent/cluster.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_exits_2() {
    let out = hybridsync(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_spec_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x", "compute_us_per_gpu": 1, "variables": [], "extra": 1}"#).unwrap();
    let out = hybridsync(&[
        "transform",
        "--graph",
        bad.to_str().unwrap(),
        "--cluster",
        &fixture("cluster8x6.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

fn plan_shape(plan: &Value) -> Value {
    // everything but the architecture label
    let mut p = plan.clone();
    p.as_object_mut().unwrap().remove("architecture");
    p
}

#[test]
fn hybrid_transform_of_dense_model_equals_allreduce() {
    let run = |arch: &str| {
        json(&hybridsync(&[
            "transform",
            "--graph",
            &fixture("resnet50.json"),
            "--cluster",
            &fixture("cluster8x6.json"),
            "--architecture",
            arch,
        ]))
    };
    let hybrid = run("hybrid");
    let ar = run("ar");
    assert_eq!(plan_shape(&hybrid["plan"]), plan_shape(&ar["plan"]));
}

#[test]
fn same_seed_gives_identical_documents() {
    let dir = tempfile::tempdir().unwrap();
    let run = |trace: &str| {
        let path = dir.path().join(trace);
        let out = hybridsync(&[
            "simulate",
            "--graph",
            &fixture("nmt.json"),
            "--cluster",
            &fixture("cluster8x6.json"),
            "--seed",
            "11",
            "--iterations",
            "10",
            "--trace",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        (out.stdout, std::fs::read(path).unwrap())
    };
    let (a, ta) = run("a.jsonl");
    let (b, tb) = run("b.jsonl");
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let first: Value = serde_json::from_slice(ta.split(|&c| c == b'\n').next().unwrap()).unwrap();
    assert!(first.get("tag").is_some());
}

#[test]
fn tune_then_simulate_reproduces_final_time() {
    let common = [
        "--graph".to_string(),
        fixture("lm.json"),
        "--cluster".to_string(),
        fixture("cluster8x6.json"),
        "--iterations".to_string(),
        "6".to_string(),
    ];
    let mut args = vec!["tune".to_string()];
    args.extend(common.iter().cloned());
    let tuned = json(&hybridsync(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    let best = tuned["tune"]["best_P"].as_u64().unwrap();
    let final_time = tuned["rows"][0]["simulated_time_us"].as_f64().unwrap();

    let mut args = vec!["simulate".to_string()];
    args.extend(common.iter().cloned());
    args.extend(["--partitions".to_string(), best.to_string()]);
    let sim = json(&hybridsync(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert_eq!(sim["rows"][0]["simulated_time_us"].as_f64().unwrap(), final_time);
}

#[test]
fn compare_csv_has_one_row_per_architecture() {
    let out = hybridsync(&[
        "compare",
        "--graph",
        &fixture("lm.json"),
        "--cluster",
        &fixture("cluster8x6.json"),
        "--output",
        "csv",
        "--iterations",
        "4",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("architecture,bottleneck_bytes"));
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["ar", "ps-naive", "ps-opt", "hybrid"]);
}

#[test]
fn local_agg_selects_parameter_server_variant() {
    let out = json(&hybridsync(&[
        "transform",
        "--graph",
        &fixture("lm.json"),
        "--cluster",
        &fixture("cluster8x6.json"),
        "--architecture",
        "ps",
        "--local-agg",
        "off",
    ]));
    assert_eq!(out["plan"]["architecture"], "ps-naive");
    let bad = hybridsync(&[
        "transform",
        "--graph",
        &fixture("lm.json"),
        "--cluster",
        &fixture("cluster8x6.json"),
        "--architecture",
        "ar",
        "--local-agg",
        "on",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}
