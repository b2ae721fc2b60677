//! The published end-to-end results table and its consistency checks.
//!
//! Rows are grouped into blocks sharing (mtp, context, accept ratio); each
//! block's ratio-1.0 row is its no-offload baseline.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scenario::{calibrated_budget, max_batch_size, HardwareSpec, ModelSpec};

pub const SHIPPED_TABLE_CSV: &str = include_str!("../data/reference_table.csv");
pub const SHIPPED_TABLE_SHA256: &str =
    "c8a9faa176a8c1c89c6aeb92c77c3fe875fbcb2090c043060829a4966d7677b9";

/// Relative deviation from `throughput = R * batch * otps` beyond which a
/// row is flagged.
pub const IDENTITY_TOLERANCE: f64 = 0.005;
/// Allowed relative gap between planned and published batch sizes.
pub const MEMORY_TOLERANCE: f64 = 0.06;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("reference table is empty")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub mtp: u32,
    pub context: u64,
    pub accept_ratio: f64,
    pub batch: u32,
    pub sparse_ratio: f64,
    pub throughput: f64,
    pub otps: f64,
}

impl ReferenceRow {
    /// Iteration latency implied by the row, in microseconds.
    pub fn iteration_us(&self) -> f64 {
        self.accept_ratio / self.otps * 1e6
    }

    pub fn implied_replication(&self) -> f64 {
        self.throughput / (f64::from(self.batch) * self.otps)
    }

    fn block(&self) -> (u32, u64, u64) {
        (self.mtp, self.context, self.accept_ratio.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    pub rows: Vec<ReferenceRow>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ReferenceTable {
    pub fn shipped() -> Self {
        Self::read_csv(SHIPPED_TABLE_CSV.as_bytes()).expect("shipped table parses")
    }

    pub fn shipped_checksum_ok() -> bool {
        sha256_hex(SHIPPED_TABLE_CSV.as_bytes()) == SHIPPED_TABLE_SHA256
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReferenceError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self, ReferenceError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<ReferenceRow>().enumerate() {
            let line = i + 2;
            let row = rec.map_err(|e| ReferenceError::Malformed {
                line,
                message: e.to_string(),
            })?;
            if !(row.otps > 0.0 && row.throughput > 0.0 && row.batch > 0) {
                return Err(ReferenceError::Malformed {
                    line,
                    message: "batch, throughput and otps must be positive".into(),
                });
            }
            if !(row.sparse_ratio > 0.0 && row.sparse_ratio <= 1.0) {
                return Err(ReferenceError::Malformed {
                    line,
                    message: format!("sparse ratio {} outside (0, 1]", row.sparse_ratio),
                });
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(ReferenceError::Empty);
        }
        Ok(Self { rows })
    }

    /// Rows grouped by (mtp, context, accept ratio), in first-seen order.
    pub fn blocks(&self) -> Vec<Vec<ReferenceRow>> {
        let mut out: Vec<Vec<ReferenceRow>> = Vec::new();
        for row in &self.rows {
            match out.iter_mut().find(|b| b[0].block() == row.block()) {
                Some(b) => b.push(*row),
                None => out.push(vec![*row]),
            }
        }
        out
    }

    pub fn select(&self, mtp: u32, context: u64) -> Vec<ReferenceRow> {
        self.rows
            .iter()
            .filter(|r| r.mtp == mtp && r.context == context)
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub row: ReferenceRow,
    pub implied_replication: f64,
    /// `throughput / (R * batch * otps) - 1`.
    pub residual: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Improvement {
    pub mtp: u32,
    pub context: u64,
    pub accept_ratio: f64,
    pub baseline: ReferenceRow,
    pub best: ReferenceRow,
    pub ratio: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryCheck {
    pub row: ReferenceRow,
    pub predicted_batch: u32,
    pub relative_error: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub replication: u32,
    pub identity: Vec<IdentityCheck>,
    pub improvements: Vec<Improvement>,
    pub memory: Vec<MemoryCheck>,
    /// Spread `max / min - 1` of `batch * (f + (1 - f) * ratio)` per block.
    pub memory_product_spread: Vec<(u32, u64, f64, f64)>,
}

impl ValidationReport {
    pub fn flagged_rows(&self) -> Vec<&IdentityCheck> {
        self.identity.iter().filter(|c| c.flagged).collect()
    }

    /// Number of findings: flagged rows plus memory checks out of tolerance.
    pub fn findings(&self) -> usize {
        self.flagged_rows().len() + self.memory.iter().filter(|m| !m.within_tolerance).count()
    }
}

/// Integer replication factor: the rounded median of the implied ratios, so
/// that isolated outliers do not move it.
pub fn fit_replication(rows: &[ReferenceRow]) -> u32 {
    let mut r: Vec<f64> = rows.iter().map(ReferenceRow::implied_replication).collect();
    r.sort_by(f64::total_cmp);
    let n = r.len();
    let median = if n % 2 == 1 {
        r[n / 2]
    } else {
        0.5 * (r[n / 2 - 1] + r[n / 2])
    };
    median.round().max(1.0) as u32
}

pub fn validate(table: &ReferenceTable, model: &ModelSpec) -> ValidationReport {
    let replication = fit_replication(&table.rows);
    let identity = table
        .rows
        .iter()
        .map(|row| {
            let implied = row.implied_replication();
            let residual = implied / f64::from(replication) - 1.0;
            IdentityCheck {
                row: *row,
                implied_replication: implied,
                residual,
                flagged: residual.abs() > IDENTITY_TOLERANCE,
            }
        })
        .collect();

    let mut improvements = Vec::new();
    let mut memory = Vec::new();
    let mut memory_product_spread = Vec::new();
    let f = model.indexer_fraction;
    for block in table.blocks() {
        let Some(base) = block.iter().find(|r| r.sparse_ratio >= 1.0).copied() else {
            continue;
        };
        let best = block
            .iter()
            .copied()
            .max_by(|a, b| a.throughput.total_cmp(&b.throughput))
            .expect("non-empty block");
        let ratio = best.throughput / base.throughput;
        improvements.push(Improvement {
            mtp: base.mtp,
            context: base.context,
            accept_ratio: base.accept_ratio,
            baseline: base,
            best,
            ratio,
            percent: (ratio - 1.0) * 100.0,
        });

        let hw = HardwareSpec {
            gpu_mem_bytes: calibrated_budget(model, base.context, base.batch),
            ..HardwareSpec::default()
        };
        for row in &block {
            let predicted = max_batch_size(model, &hw, row.context, row.sparse_ratio)
                .expect("table ratios are validated on load");
            let rel = f64::from(predicted) / f64::from(row.batch) - 1.0;
            memory.push(MemoryCheck {
                row: *row,
                predicted_batch: predicted,
                relative_error: rel,
                within_tolerance: rel.abs() <= MEMORY_TOLERANCE,
            });
        }
        let products: Vec<f64> = block
            .iter()
            .map(|r| f64::from(r.batch) * (f + (1.0 - f) * r.sparse_ratio))
            .collect();
        let lo = products.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = products.iter().copied().fold(0.0, f64::max);
        memory_product_spread.push((base.mtp, base.context, base.accept_ratio, hi / lo - 1.0));
    }

    ValidationReport {
        replication,
        identity,
        improvements,
        memory,
        memory_product_spread,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_table_checksum() {
        assert!(ReferenceTable::shipped_checksum_ok());
        assert_eq!(ReferenceTable::shipped().rows.len(), 18);
    }

    #[test]
    fn replication_is_eight_with_one_outlier() {
        let t = ReferenceTable::shipped();
        let r = validate(&t, &ModelSpec::default());
        assert_eq!(r.replication, 8);
        let flagged = r.flagged_rows();
        assert_eq!(flagged.len(), 1);
        assert_eq!(
            (flagged[0].row.context, flagged[0].row.batch),
            (131_072, 13)
        );
        assert!((flagged[0].implied_replication - 12.17).abs() < 0.01);
    }

    #[test]
    fn improvements_match_headline_numbers() {
        let r = validate(&ReferenceTable::shipped(), &ModelSpec::default());
        let pct: Vec<f64> = r.improvements.iter().map(|i| i.percent).collect();
        assert_eq!(pct.len(), 4);
        assert!((pct[0] - 69.45).abs() < 0.01, "{pct:?}");
        assert!((pct[2] - 45.84).abs() < 0.01, "{pct:?}");
        assert!((pct[3] - 122.65).abs() < 0.01, "{pct:?}");
    }

    #[test]
    fn edited_row_is_flagged() {
        let mut t = ReferenceTable::shipped();
        t.rows[2].throughput *= 1.02;
        let r = validate(&t, &ModelSpec::default());
        let flagged = r.flagged_rows();
        assert_eq!(flagged.len(), 2);
        assert!((flagged[0].residual - 0.02).abs() < 0.001);
    }

    #[test]
    fn malformed_rows_name_lines() {
        let text =
            "mtp,context,accept_ratio,batch,sparse_ratio,throughput,otps\n2,1,1.7,5,1.0,10,-1\n";
        let e = ReferenceTable::read_csv(text.as_bytes()).unwrap_err();
        assert!(
            matches!(e, ReferenceError::Malformed { line: 2, .. }),
            "{e}"
        );
    }
}
