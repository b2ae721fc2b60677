//! `plan`: per-layer strategy assignment from a miss profile.

use std::fs::File;
use std::path::Path;

use sparsepool::cache::read_layer_means;
use sparsepool::pipeline::{plan_layers, Strategy};

use crate::{write_json, CliError, Globals, Outcome};

pub const PLAN_FILE: &str = "plan.json";

pub fn run(g: &Globals, misses: &Path, threshold: f64) -> Result<Outcome, CliError> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(CliError::Argument(format!(
            "threshold {threshold} must be >= 0"
        )));
    }
    let file = File::open(misses).map_err(|source| CliError::Io {
        path: misses.to_path_buf(),
        source,
    })?;
    let means = read_layer_means(file)?;
    let plan = plan_layers(&means, threshold, &misses.display().to_string());
    let out = g.out_dir().join(PLAN_FILE);
    write_json(&out, &plan)?;
    println!(
        "plan: {} layers, {} dba, {} da (threshold {threshold}) -> {}",
        plan.strategies.len(),
        plan.count(Strategy::Dba),
        plan.count(Strategy::Da),
        out.display()
    );
    Ok(Outcome::Success)
}
