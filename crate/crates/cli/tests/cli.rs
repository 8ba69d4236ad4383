use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sortition"))
        .args(["--threads", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(text.lines().last().expect("stderr has a line")).expect("stderr is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn count_t1() {
    let o = run(&["count", "--instance", p(&data("t1.json"))]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "4");
}

#[test]
fn count_reports_shrinking_counts() {
    let o = run(&["count", "--instance", p(&data("small_assembly.json")), "--report-layers"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "158");
    let counts: Vec<u64> = String::from_utf8(o.stderr)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["event"] == "feature_added")
        .map(|v| v["count"].as_str().unwrap().parse().unwrap())
        .collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    assert_eq!(counts[0], 495);
}

#[test]
fn count_subset_and_csv_pair() {
    let o = run(&["count", "--instance", p(&data("small_assembly.json")), "--features", "gender"]);
    assert!(o.status.success());
    let by_gender: u64 = stdout(&o).trim().parse().unwrap();
    assert!(by_gender >= 158);

    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.csv");
    let quotas = dir.path().join("quotas.csv");
    std::fs::write(&pool, "id,gender\n1,F\n2,F\n3,M\n4,M\n").unwrap();
    std::fs::write(&quotas, "feature,value,min,max\ngender,F,1,1\ngender,M,1,1\n").unwrap();
    let o = run(&[
        "count",
        "--pool-csv",
        p(&pool),
        "--quotas-csv",
        p(&quotas),
        "--panel-size",
        "2",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).trim(), "4");
}

#[test]
fn sample_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let inst = data("small_assembly.json");
    for out in [&a, &b] {
        let o = run(&["sample", "--instance", p(&inst), "--num", "3", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success());
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 3);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["members"].as_array().unwrap().len(), 4);
    assert_eq!(first["seed"], 7);
}

#[test]
fn holdout_all_features_gives_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let o = run(&[
        "holdout",
        "--instance",
        p(&data("small_assembly.json")),
        "--all-features",
        "--num",
        "500",
        "--exact",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{o:?}");
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][0], "small_assembly");
    assert!(rows.iter().all(|r| !r[7].is_empty()));
}

#[test]
fn evaluate_sampled_panels() {
    let dir = tempfile::tempdir().unwrap();
    let panels = dir.path().join("panels.jsonl");
    let report = dir.path().join("report.json");
    let inst = data("t1.json");
    assert!(run(&["sample", "--instance", p(&inst), "--num", "200", "--out", p(&panels)])
        .status
        .success());
    let o = run(&["evaluate", "--instance", p(&inst), "--panels", p(&panels), "--out", p(&report)]);
    assert!(o.status.success(), "{o:?}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let total: u64 = v["marginals"]["members"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["hits"].as_u64().unwrap())
        .sum();
    assert_eq!(total, 400);
}

#[test]
fn fair_sample_exact_t1() {
    let dir = tempfile::tempdir().unwrap();
    let targets = dir.path().join("targets.json");
    let out = dir.path().join("fit.json");
    let panels = dir.path().join("panels.jsonl");
    std::fs::write(&targets, r#"{"1": 0.6, "2": 0.4, "3": 0.5, "4": 0.5}"#).unwrap();
    let o = run(&[
        "fair-sample",
        "--instance",
        p(&data("t1.json")),
        "--targets",
        p(&targets),
        "--exact",
        "--num",
        "5",
        "--out",
        p(&out),
        "--panels-out",
        p(&panels),
    ]);
    assert!(o.status.success(), "{o:?}");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["converged"], true);
    assert!(v["weights"]["1"].as_u64().unwrap() > v["weights"]["2"].as_u64().unwrap());
    assert_eq!(std::fs::read_to_string(&panels).unwrap().lines().count(), 5);
}

#[test]
fn lottery_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let lot = dir.path().join("lot.jsonl");
    let o = run(&[
        "lottery",
        "--instance",
        p(&data("small_assembly.json")),
        "--m",
        "20",
        "--seed",
        "3",
        "--out",
        p(&lot),
    ]);
    assert!(o.status.success(), "{o:?}");
    let text = std::fs::read_to_string(&lot).unwrap();
    assert_eq!(text.lines().count(), 21);
    let by_seed: Value = serde_json::from_str(&stdout(&run(&["lottery-draw", "--lottery", p(&lot), "--seed", "45"]))).unwrap();
    assert_eq!(by_seed["index"], 5);
    let by_index: Value = serde_json::from_str(&stdout(&run(&["lottery-draw", "--lottery", p(&lot), "--index", "5"]))).unwrap();
    assert_eq!(by_seed, by_index);
    let o = run(&["lottery-draw", "--lottery", p(&lot), "--index", "20"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn verify_small_instance() {
    let o = run(&["verify", "--instance", p(&data("small_assembly.json")), "--samples", "20000"]);
    assert!(o.status.success(), "{o:?}");
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["enumerated_panels"], 158);
}

#[test]
fn exit_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let infeasible = dir.path().join("infeasible.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(data("t1.json")).unwrap()).unwrap();
    // Two women and one man do not fit on a panel of two.
    v["quotas"][0]["min"] = 2.into();
    v["quotas"][0]["max"] = 2.into();
    std::fs::write(&infeasible, v.to_string()).unwrap();
    let o = run(&["sample", "--instance", p(&infeasible), "--num", "1"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert_eq!(stderr_json(&o)["error"], "infeasible");

    let o = run(&["count", "--instance", "/nonexistent/instance.json"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["exit_code"], 4);

    let o = run(&["sample", "--instance", p(&data("t1.json"))]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"], "usage");
}
