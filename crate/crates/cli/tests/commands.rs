//! End-to-end runs of the `sparsepool` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use tempfile::TempDir;

use sparsepool::costmodel::synthetic_profile;
use sparsepool::pipeline::simulate_decode;
use sparsepool::reference::SHIPPED_TABLE_CSV;
use sparsepool::scenario::Scenario;
use sparsepool::trace::{generate_trace, write_trace, AccessTrace, StepAccess, TraceGenParams};

const SMALL_SCENARIO: &str = "\
[model]
num_layers = 4
topk = 256

[deployment]
context_len = 4096
";

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn sparsepool(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_sparsepool"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn workdir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL_SCENARIO).unwrap();
    dir
}

/// Rows of a CSV file as header-keyed string maps.
fn csv_rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            headers
                .iter()
                .map(String::from)
                .zip(r.iter().map(String::from))
                .collect()
        })
        .collect()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key]
        .parse()
        .unwrap_or_else(|_| panic!("{key} = {:?}", row[key]))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn shipped_table_reports_one_flagged_row() {
    let dir = workdir();
    let run = sparsepool(dir.path(), &["validate-ref"]);
    assert_eq!(run.code, 1, "{}", run.stdout);
    let rows = csv_rows(&dir.path().join("out/identity_residuals.csv"));
    let flagged: Vec<_> = rows.iter().filter(|r| r["flagged"] == "true").collect();
    assert_eq!(flagged.len(), 1);
    assert_eq!(
        (flagged[0]["context"].as_str(), flagged[0]["batch"].as_str()),
        ("131072", "13")
    );
    let improvements = csv_rows(&dir.path().join("out/improvements.csv"));
    let first = &improvements[0];
    assert_eq!(format!("{:.1}", num(first, "percent")), "69.4");
    let report = read_json(&dir.path().join("out/validation.json"));
    assert_eq!(report["checksum_ok"], Value::Bool(true));
    assert_eq!(report["report"]["replication"], 8);
}

#[test]
fn table_without_the_outlier_validates_clean() {
    let dir = workdir();
    let text: String = SHIPPED_TABLE_CSV
        .lines()
        .filter(|l| !l.starts_with("2,131072,1.7,13,"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("table.csv"), text).unwrap();
    let run = sparsepool(dir.path(), &["validate-ref", "--table", "table.csv"]);
    assert_eq!(run.code, 0, "{}", run.stdout);
}

#[test]
fn edited_row_is_flagged_with_its_residual() {
    let dir = workdir();
    let text = SHIPPED_TABLE_CSV.replace(
        "2,32768,1.7,96,0.48,13155.98,",
        "2,32768,1.7,96,0.48,13813.78,",
    );
    assert_ne!(text, SHIPPED_TABLE_CSV);
    fs::write(dir.path().join("table.csv"), text).unwrap();
    let run = sparsepool(dir.path(), &["validate-ref", "--table", "table.csv"]);
    assert_eq!(run.code, 1);
    let rows = csv_rows(&dir.path().join("out/identity_residuals.csv"));
    let edited = rows
        .iter()
        .find(|r| r["batch"] == "96" && r["mtp"] == "2")
        .unwrap();
    assert_eq!(edited["flagged"], "true");
    let expected = 13813.78 / (8.0 * 96.0 * 17.13) - 1.0;
    assert!((num(edited, "residual") - expected).abs() < 1e-9);
}

#[test]
fn malformed_table_is_an_input_error() {
    let dir = workdir();
    fs::write(
        dir.path().join("table.csv"),
        "mtp,context\n2,not-a-number\n",
    )
    .unwrap();
    let run = sparsepool(dir.path(), &["validate-ref", "--table", "table.csv"]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.starts_with("error:"), "{}", run.stderr);
    assert_eq!(
        sparsepool(dir.path(), &["validate-ref", "--table", "absent.csv"]).code,
        2
    );
}

#[test]
fn calibrating_on_one_row_is_an_input_error() {
    let dir = workdir();
    let text: String = SHIPPED_TABLE_CSV
        .lines()
        .take(2)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(dir.path().join("one.csv"), text).unwrap();
    let run = sparsepool(
        dir.path(),
        &["calibrate", "--table", "one.csv", "--no-heldout"],
    );
    assert_eq!(run.code, 2, "{}", run.stdout);
}

fn trace_gen(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "trace",
        "gen",
        "--layers",
        "4",
        "--context",
        "8192",
        "--topk",
        "512",
        "--steps",
        "48",
    ];
    args.extend_from_slice(extra);
    let run = sparsepool(dir, &args);
    assert_eq!(run.code, 0, "{}", run.stderr);
}

#[test]
fn generated_similarity_matches_its_target() {
    let dir = workdir();
    trace_gen(dir.path(), &["--similarity", "0.9", "--output", "t.bin"]);
    let run = sparsepool(dir.path(), &["trace", "stats", "t.bin"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let rows = csv_rows(&dir.path().join("out/similarity.csv"));
    assert_eq!(rows.len(), 4);
    let mean = rows.iter().map(|r| num(r, "mean")).sum::<f64>() / rows.len() as f64;
    assert!((0.88..=0.92).contains(&mean), "mean similarity {mean}");
}

#[test]
fn constant_trace_scores_one() {
    let dir = workdir();
    let set: Vec<u32> = (0..32).map(|i| i * 3).collect();
    let trace = AccessTrace {
        num_layers: 2,
        context_len: 128,
        topk: 32,
        steps: (0..10)
            .map(|_| StepAccess {
                layers: vec![set.clone(); 2],
                tokens_accepted: 1,
            })
            .collect(),
        prefill_windows: None,
    };
    write_trace(&trace, dir.path().join("c.bin"), 1).unwrap();
    assert_eq!(sparsepool(dir.path(), &["trace", "stats", "c.bin"]).code, 0);
    for row in csv_rows(&dir.path().join("out/similarity.csv")) {
        assert_eq!(
            (num(&row, "mean"), num(&row, "min"), num(&row, "stdev")),
            (1.0, 1.0, 0.0)
        );
    }
}

#[test]
fn convert_round_trip_is_byte_identical() {
    let dir = workdir();
    trace_gen(dir.path(), &["--output", "v1.bin", "--format-version", "1"]);
    let p = dir.path();
    assert_eq!(
        sparsepool(
            p,
            &["trace", "convert", "v1.bin", "v2.bin", "--to-version", "2"]
        )
        .code,
        0
    );
    assert_eq!(
        sparsepool(
            p,
            &[
                "trace",
                "convert",
                "v2.bin",
                "back.bin",
                "--to-version",
                "1"
            ]
        )
        .code,
        0
    );
    let original = fs::read(p.join("v1.bin")).unwrap();
    assert_ne!(original, fs::read(p.join("v2.bin")).unwrap());
    assert_eq!(original, fs::read(p.join("back.bin")).unwrap());
}

fn write_layer_means(path: &Path, means: &[(usize, f64)]) {
    let mut text = String::from("layer,mean_misses,min,max\n");
    for (l, m) in means {
        text.push_str(&format!("{l},{m},0,{}\n", m.ceil()));
    }
    fs::write(path, text).unwrap();
}

fn plan_strategies(dir: &Path, threshold: &str) -> Vec<String> {
    let run = sparsepool(dir, &["plan", "misses.csv", "--threshold", threshold]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let plan = read_json(&dir.join("out/plan.json"));
    plan["strategies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn plan_splits_layers_at_the_threshold() {
    let dir = workdir();
    let means = [16.66, 120.0, 605.0, 300.0, 42.0];
    write_layer_means(
        &dir.path().join("misses.csv"),
        &means.iter().copied().enumerate().collect::<Vec<_>>(),
    );
    assert_eq!(
        plan_strategies(dir.path(), "256"),
        ["da", "da", "dba", "dba", "da"]
    );
    assert!(plan_strategies(dir.path(), "0").iter().all(|s| s == "dba"));
    assert!(plan_strategies(dir.path(), "605.5")
        .iter()
        .all(|s| s == "da"));
    let first = fs::read(dir.path().join("out/plan.json")).unwrap();
    plan_strategies(dir.path(), "605.5");
    assert_eq!(first, fs::read(dir.path().join("out/plan.json")).unwrap());
}

#[test]
fn plan_rejects_a_missing_layer() {
    let dir = workdir();
    write_layer_means(&dir.path().join("misses.csv"), &[(0, 10.0), (2, 30.0)]);
    let run = sparsepool(dir.path(), &["plan", "misses.csv", "--threshold", "20"]);
    assert_eq!(run.code, 2);
}

fn sweep(dir: &Path, name: &str, spec: &str, extra: &[&str]) -> Run {
    fs::write(dir.join(format!("{name}.toml")), spec).unwrap();
    let spec_file = format!("{name}.toml");
    let out = format!("{name}-out");
    let mut args = vec!["--out", out.as_str()];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["sweep", spec_file.as_str()]);
    sparsepool(dir, &args)
}

#[test]
fn single_point_sweep_equals_simulate_decode() {
    let dir = workdir();
    let spec = "[axes]\nbatch_size = [96]\nsparse_ratio = [0.5]\n\n[trace.generator]\nnum_steps = 10\nseed = 3\n";
    let run = sweep(dir.path(), "one", spec, &["--config", "small.toml"]);
    assert_eq!(run.code, 0, "{}", run.stderr);

    let mut s = Scenario::from_toml_str(SMALL_SCENARIO).unwrap();
    s.deployment.batch_size = 96;
    s.deployment.sparse_ratio = 0.5;
    let trace = generate_trace(&TraceGenParams {
        num_layers: 4,
        context_len: 4096,
        topk: 256,
        num_steps: 10,
        mean_accept: s.model.accept_ratio,
        seed: 3,
        ..TraceGenParams::default()
    })
    .unwrap();
    let expected = simulate_decode(&s, &trace, &synthetic_profile()).unwrap();

    let rows = csv_rows(&dir.path().join("one-out/sweep_report.csv"));
    assert_eq!(rows.len(), 1);
    let r = &rows[0];
    assert_eq!(r["feasible"], "true");
    assert_eq!(num(r, "mean_iter_us"), expected.mean_iter_us);
    assert_eq!(num(r, "otps"), expected.otps);
    assert_eq!(num(r, "throughput"), expected.throughput);
    assert_eq!(
        num(r, "mean_misses_per_request"),
        expected.mean_misses_per_request
    );
}

#[test]
fn throughput_rises_with_batch_up_to_the_knee() {
    let dir = workdir();
    let spec = "memory_slack = 1.0\n[axes]\nbatch_size = [52, 64, 96, 128, 160]\nsparse_ratio = [0.2]\n\n[trace.generator]\nnum_steps = 10\n";
    let run = sweep(dir.path(), "batch", spec, &["--config", "small.toml"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let plot = csv_rows(&dir.path().join("batch-out/throughput_vs_batch.csv"));
    let report = csv_rows(&dir.path().join("batch-out/sweep_report.csv"));
    assert_eq!(plot.len(), 5);
    let tp: Vec<f64> = plot.iter().map(|r| num(r, "throughput")).collect();
    let knee = tp
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(knee > 0, "{tp:?}");
    assert!(tp[..=knee].windows(2).all(|w| w[1] >= w[0]), "{tp:?}");
    for (p, r) in plot.iter().zip(&report) {
        assert_eq!(p["batch"], r["batch"]);
        assert_eq!(p["throughput"], r["throughput"]);
        let s = num(r, "batch");
        let otps = num(r, "otps");
        assert!((num(p, "throughput") - 8.0 * s * otps).abs() <= 1e-9 * num(p, "throughput"));
    }
}

#[test]
fn misses_fall_as_the_ratio_grows() {
    let dir = workdir();
    let spec = "[axes]\nsparse_ratio = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0]\nbatch_size = [8]\n\n[trace.generator]\nnum_steps = 10\n";
    let run = sweep(dir.path(), "ratio", spec, &["--config", "small.toml"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let rows = csv_rows(&dir.path().join("ratio-out/miss_vs_ratio.csv"));
    let misses: Vec<f64> = rows
        .iter()
        .map(|r| num(r, "mean_misses_per_request"))
        .collect();
    assert_eq!(misses.len(), 6);
    assert!(misses.windows(2).all(|w| w[1] <= w[0]), "{misses:?}");
    assert_eq!(*misses.last().unwrap(), 0.0);
    let warmup = csv_rows(&dir.path().join("ratio-out/warmup_effect.csv"));
    assert_eq!(warmup.len(), 5 * 10);
}

#[test]
fn sweep_over_the_point_cap_is_an_input_error() {
    let dir = workdir();
    let spec = "max_points = 3\n[axes]\nbatch_size = [1, 2]\nsparse_ratio = [1.0, 0.5]\n";
    let run = sweep(dir.path(), "cap", spec, &["--config", "small.toml"]);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("above the cap"), "{}", run.stderr);
    assert!(!dir.path().join("cap-out").exists());
}

#[test]
fn infeasible_points_are_kept_and_marked() {
    let dir = workdir();
    let spec = "[axes]\nbatch_size = [52, 160]\nsparse_ratio = [1.0]\n\n[trace.generator]\nnum_steps = 4\n";
    let run = sweep(dir.path(), "mem", spec, &[]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let rows = csv_rows(&dir.path().join("mem-out/sweep_report.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["feasible"], "true");
    assert_eq!(rows[1]["feasible"], "false");
    assert!(
        rows[1]["note"].contains("exceeds memory"),
        "{}",
        rows[1]["note"]
    );
    assert_eq!(rows[1]["throughput"], "");
}

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let dir = workdir();
    let spec = "[axes]\nbatch_size = [16, 52]\nsparse_ratio = [0.2, 1.0]\ncontext_len = [2048, 4096]\n\n[trace.generator]\nnum_steps = 8\n";
    let files = [
        "sweep_report.csv",
        "throughput_vs_batch.csv",
        "miss_vs_ratio.csv",
        "warmup_effect.csv",
    ];
    let a = sweep(
        dir.path(),
        "a",
        spec,
        &["--config", "small.toml", "--jobs", "1"],
    );
    let b = sweep(
        dir.path(),
        "b",
        spec,
        &["--config", "small.toml", "--jobs", "3"],
    );
    assert_eq!((a.code, b.code), (0, 0));
    for f in files {
        let x = fs::read(dir.path().join("a-out").join(f)).unwrap();
        let y = fs::read(dir.path().join("b-out").join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn simulate_writes_every_export() {
    let dir = workdir();
    let run = sparsepool(
        dir.path(),
        &[
            "--config",
            "small.toml",
            "--seed",
            "5",
            "simulate",
            "--timeline-step",
            "2",
        ],
    );
    assert_eq!(run.code, 0, "{}", run.stderr);
    for f in [
        "report.csv",
        "report.json",
        "miss_profile.csv",
        "timeline.json",
        "crossover.json",
    ] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    let timeline = read_json(&dir.path().join("out/timeline.json"));
    assert_eq!(timeline["step"], 2);
    let spans = timeline["spans"].as_array().unwrap();
    assert!(!spans.is_empty());
    assert_eq!(csv_rows(&dir.path().join("out/miss_profile.csv")).len(), 4);
    assert!(run.stdout.contains("crossover:"));
}

#[test]
fn simulate_rejects_bad_arguments() {
    let dir = workdir();
    let p = dir.path();
    assert_eq!(
        sparsepool(
            p,
            &[
                "--config",
                "small.toml",
                "simulate",
                "--timeline-step",
                "1000"
            ]
        )
        .code,
        2
    );
    assert_eq!(
        sparsepool(p, &["--config", "small.toml", "--jobs", "0", "simulate"]).code,
        2
    );
    assert_eq!(
        sparsepool(p, &["--config", "missing.toml", "simulate"]).code,
        2
    );
}
