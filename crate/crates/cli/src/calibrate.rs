//! `calibrate`: fit the cost profile to reference rows and report residuals.

use serde::Serialize;

use sparsepool::calibration::{calibrate, CalibrationConfig, RowRole};
use sparsepool::reference::ReferenceTable;

use crate::{create_file, write_csv, write_json, CalibrateArgs, CliError, Globals, Outcome};

pub const PROFILE_FILE: &str = "calibrated_profile.csv";
pub const REPORT_FILE: &str = "calibration_report.json";
pub const ROWS_FILE: &str = "calibration_rows.csv";

#[derive(Serialize)]
struct RowOut {
    role: RowRole,
    mtp: u32,
    context: u64,
    accept_ratio: f64,
    batch: u32,
    sparse_ratio: f64,
    width: f64,
    mean_misses_per_request: f64,
    target_iter_us: f64,
    predicted_iter_us: f64,
    published_otps: f64,
    predicted_otps: f64,
    otps_error: f64,
}

pub fn run(g: &Globals, args: &CalibrateArgs) -> Result<Outcome, CliError> {
    let table = match &args.table {
        Some(p) => ReferenceTable::load(p)?,
        None => ReferenceTable::shipped(),
    };
    let mut cfg = CalibrationConfig {
        base: g.scenario()?,
        anchor_weight: args.anchor_weight,
        ..CalibrationConfig::default()
    };
    if let Some(seed) = g.seed {
        cfg.trace.seed = seed;
    }
    let fit_rows = table.select(args.fit_mtp, args.fit_context);
    let heldout: Vec<_> = if args.no_heldout {
        Vec::new()
    } else {
        args.heldout_mtp
            .iter()
            .filter(|&&m| m != args.fit_mtp)
            .flat_map(|&m| table.select(m, args.fit_context))
            .collect()
    };
    let report = calibrate(&cfg, &fit_rows, &heldout)?;

    let out = g.out_dir();
    let profile_path = args
        .output
        .clone()
        .unwrap_or_else(|| out.join(PROFILE_FILE));
    report.profile().write_csv(create_file(&profile_path)?)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let rows: Vec<RowOut> = report
        .rows
        .iter()
        .map(|p| RowOut {
            role: p.role,
            mtp: p.row.mtp,
            context: p.row.context,
            accept_ratio: p.row.accept_ratio,
            batch: p.row.batch,
            sparse_ratio: p.row.sparse_ratio,
            width: p.width,
            mean_misses_per_request: p.mean_misses_per_request,
            target_iter_us: p.target_iter_us,
            predicted_iter_us: p.predicted_iter_us,
            published_otps: p.row.otps,
            predicted_otps: p.predicted_otps,
            otps_error: p.otps_error,
        })
        .collect();
    write_csv(&out.join(ROWS_FILE), &rows)?;

    let groups: Vec<String> = report
        .groups
        .iter()
        .zip(&report.multipliers)
        .map(|(g, m)| format!("{g:?}={m:.4}"))
        .collect();
    println!(
        "fit: {} rows, {} iterations, multipliers {}",
        fit_rows.len(),
        report.fit_iterations,
        groups.join(" ")
    );
    for (mtp, w) in &report.widths {
        println!("width: mtp {mtp} -> {w:.4} tokens per request");
    }
    for p in &report.rows {
        println!(
            "{:?}: mtp {} accept {} batch {} ratio {}: iter {:.2} ms (published {:.2}), otps error {:+.2}%",
            p.role,
            p.row.mtp,
            p.row.accept_ratio,
            p.row.batch,
            p.row.sparse_ratio,
            p.predicted_iter_us / 1e3,
            p.target_iter_us / 1e3,
            p.otps_error * 100.0
        );
    }
    println!("profile: {}", profile_path.display());
    Ok(Outcome::Success)
}
