//! `validate-ref`: arithmetic and memory-model checks over a results table.

use std::path::Path;

use serde::Serialize;

use sparsepool::reference::{validate, ReferenceTable, ValidationReport};

use crate::{create_dir, write_csv, write_json, CliError, Globals, Outcome};

pub const REPORT_FILE: &str = "validation.json";
pub const IDENTITY_FILE: &str = "identity_residuals.csv";
pub const IMPROVEMENT_FILE: &str = "improvements.csv";
pub const MEMORY_FILE: &str = "memory_check.csv";

#[derive(Serialize)]
struct IdentityRow {
    mtp: u32,
    context: u64,
    accept_ratio: f64,
    batch: u32,
    sparse_ratio: f64,
    throughput: f64,
    otps: f64,
    implied_replication: f64,
    residual: f64,
    flagged: bool,
}

#[derive(Serialize)]
struct ImprovementRow {
    mtp: u32,
    context: u64,
    accept_ratio: f64,
    baseline_batch: u32,
    baseline_throughput: f64,
    best_batch: u32,
    best_ratio: f64,
    best_throughput: f64,
    ratio: f64,
    percent: f64,
}

#[derive(Serialize)]
struct MemoryRow {
    mtp: u32,
    context: u64,
    sparse_ratio: f64,
    batch: u32,
    predicted_batch: u32,
    relative_error: f64,
    within_tolerance: bool,
}

#[derive(Serialize)]
struct Written<'a> {
    table: String,
    checksum_ok: Option<bool>,
    findings: usize,
    report: &'a ValidationReport,
}

pub fn run(g: &Globals, table_path: Option<&Path>) -> Result<Outcome, CliError> {
    let (table, label, checksum_ok) = match table_path {
        Some(p) => (ReferenceTable::load(p)?, p.display().to_string(), None),
        None => (
            ReferenceTable::shipped(),
            "shipped".to_string(),
            Some(ReferenceTable::shipped_checksum_ok()),
        ),
    };
    let model = g.scenario()?.model;
    let report = validate(&table, &model);
    let mut findings = report.findings();
    if checksum_ok == Some(false) {
        findings += 1;
    }

    let out = g.out_dir();
    create_dir(&out)?;
    write_json(
        &out.join(REPORT_FILE),
        &Written {
            table: label.clone(),
            checksum_ok,
            findings,
            report: &report,
        },
    )?;
    let identity: Vec<IdentityRow> = report
        .identity
        .iter()
        .map(|c| IdentityRow {
            mtp: c.row.mtp,
            context: c.row.context,
            accept_ratio: c.row.accept_ratio,
            batch: c.row.batch,
            sparse_ratio: c.row.sparse_ratio,
            throughput: c.row.throughput,
            otps: c.row.otps,
            implied_replication: c.implied_replication,
            residual: c.residual,
            flagged: c.flagged,
        })
        .collect();
    write_csv(&out.join(IDENTITY_FILE), &identity)?;
    let improvements: Vec<ImprovementRow> = report
        .improvements
        .iter()
        .map(|i| ImprovementRow {
            mtp: i.mtp,
            context: i.context,
            accept_ratio: i.accept_ratio,
            baseline_batch: i.baseline.batch,
            baseline_throughput: i.baseline.throughput,
            best_batch: i.best.batch,
            best_ratio: i.best.sparse_ratio,
            best_throughput: i.best.throughput,
            ratio: i.ratio,
            percent: i.percent,
        })
        .collect();
    write_csv(&out.join(IMPROVEMENT_FILE), &improvements)?;
    let memory: Vec<MemoryRow> = report
        .memory
        .iter()
        .map(|m| MemoryRow {
            mtp: m.row.mtp,
            context: m.row.context,
            sparse_ratio: m.row.sparse_ratio,
            batch: m.row.batch,
            predicted_batch: m.predicted_batch,
            relative_error: m.relative_error,
            within_tolerance: m.within_tolerance,
        })
        .collect();
    write_csv(&out.join(MEMORY_FILE), &memory)?;

    println!("table: {label} ({} rows)", table.rows.len());
    if let Some(ok) = checksum_ok {
        println!("checksum: {}", if ok { "ok" } else { "MISMATCH" });
    }
    println!("replication factor: {}", report.replication);
    for c in report.flagged_rows() {
        println!(
            "flagged: mtp {} context {} batch {} ratio {}: implied replication {:.3}, residual {:+.2}%",
            c.row.mtp,
            c.row.context,
            c.row.batch,
            c.row.sparse_ratio,
            c.implied_replication,
            c.residual * 100.0
        );
    }
    for i in &report.improvements {
        println!(
            "improvement: mtp {} context {} accept {}: {:.2} / {:.2} = {:.4} ({:.1}%)",
            i.mtp,
            i.context,
            i.accept_ratio,
            i.best.throughput,
            i.baseline.throughput,
            i.ratio,
            i.percent
        );
    }
    for m in report.memory.iter().filter(|m| !m.within_tolerance) {
        println!(
            "memory: context {} ratio {} batch {} predicted {} ({:+.1}%)",
            m.row.context,
            m.row.sparse_ratio,
            m.row.batch,
            m.predicted_batch,
            m.relative_error * 100.0
        );
    }
    println!(
        "memory model: {}/{} batch sizes within tolerance",
        report.memory.iter().filter(|m| m.within_tolerance).count(),
        report.memory.len()
    );
    println!("findings: {findings}");
    Ok(if findings == 0 {
        Outcome::Success
    } else {
        Outcome::Findings(findings)
    })
}
