//! Measured compute costs with bilinear interpolation.
//!
//! Each operation owns a rectilinear grid over (batch, context). Points may be
//! scattered across that grid; missing cells are filled by linear
//! interpolation along batch, then along context. An operation measured at a
//! single context is context-independent.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    IndexerLogits,
    IndexerTopk,
    PreAttn,
    SparseMla,
    DenseMlp,
    MoeDispatch,
    MoeCombine,
    MergeAttn,
}

impl Op {
    pub const ALL: [Op; 8] = [
        Op::IndexerLogits,
        Op::IndexerTopk,
        Op::PreAttn,
        Op::SparseMla,
        Op::DenseMlp,
        Op::MoeDispatch,
        Op::MoeCombine,
        Op::MergeAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::IndexerLogits => "indexer_logits",
            Op::IndexerTopk => "indexer_topk",
            Op::PreAttn => "pre_attn",
            Op::SparseMla => "sparse_mla",
            Op::DenseMlp => "dense_mlp",
            Op::MoeDispatch => "moe_dispatch",
            Op::MoeCombine => "moe_combine",
            Op::MergeAttn => "merge_attn",
        }
    }

    /// Ops whose batch argument counts verified tokens rather than requests.
    pub fn token_parallel(self) -> bool {
        matches!(self, Op::IndexerLogits | Op::PreAttn | Op::DenseMlp)
    }

    /// Ops whose cost does not depend on history length.
    pub fn context_free(self) -> bool {
        matches!(self, Op::DenseMlp | Op::MoeDispatch | Op::MoeCombine)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Op {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Op::ALL
            .into_iter()
            .find(|op| op.name() == s.trim())
            .ok_or_else(|| s.to_string())
    }
}

/// Anything that can price one operation.
pub trait CostSource: Sync {
    fn op_time(&self, op: Op, batch: f64, context: f64) -> f64;
}

#[derive(Debug, Error)]
pub enum CostTableError {
    #[error("line {line}: unknown op `{name}`")]
    UnknownOp { line: usize, name: String },
    #[error("line {line}: time must be positive, got {time}")]
    NonPositiveTime { line: usize, time: f64 },
    #[error("line {line}: batch and context must be positive")]
    BadCoordinate { line: usize },
    #[error("line {line}: duplicate point ({op}, batch {batch}, context {context}), first at line {first}")]
    Duplicate {
        line: usize,
        first: usize,
        op: Op,
        batch: f64,
        context: f64,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no points for op `{0}`")]
    MissingOp(Op),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
struct Row {
    op: String,
    batch: f64,
    context: f64,
    time_us: f64,
}

#[derive(Debug, Serialize)]
struct RowOut<'a> {
    op: &'a str,
    batch: f64,
    context: f64,
    time_us: f64,
}

/// One operation's filled grid. `values[ci * batches.len() + bi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpGrid {
    pub batches: Vec<f64>,
    pub contexts: Vec<f64>,
    pub values: Vec<f64>,
    /// Which cells were measured rather than filled.
    pub measured: Vec<bool>,
}

impl OpGrid {
    fn from_points(points: &[(f64, f64, f64)]) -> Self {
        let mut batches: Vec<f64> = points.iter().map(|p| p.0).collect();
        let mut contexts: Vec<f64> = points.iter().map(|p| p.1).collect();
        for v in [&mut batches, &mut contexts] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        let nb = batches.len();
        let mut cells: Vec<Option<f64>> = vec![None; nb * contexts.len()];
        for &(b, c, t) in points {
            let bi = batches.binary_search_by(|x| x.total_cmp(&b)).unwrap();
            let ci = contexts.binary_search_by(|x| x.total_cmp(&c)).unwrap();
            cells[ci * nb + bi] = Some(t);
        }
        let measured = cells.iter().map(Option::is_some).collect();

        for ci in 0..contexts.len() {
            let row: Vec<Option<f64>> = cells[ci * nb..(ci + 1) * nb].to_vec();
            let filled = fill_line(&batches, &row);
            cells[ci * nb..(ci + 1) * nb].copy_from_slice(&filled);
        }
        for bi in 0..nb {
            let col: Vec<Option<f64>> = (0..contexts.len()).map(|ci| cells[ci * nb + bi]).collect();
            let filled = fill_line(&contexts, &col);
            for (ci, v) in filled.into_iter().enumerate() {
                cells[ci * nb + bi] = v;
            }
        }
        let values = cells
            .into_iter()
            .map(|v| v.expect("every grid column has a measured point").max(0.0))
            .collect();
        Self {
            batches,
            contexts,
            values,
            measured,
        }
    }

    fn at(&self, bi: usize, ci: usize) -> f64 {
        self.values[ci * self.batches.len() + bi]
    }

    pub fn lookup(&self, batch: f64, context: f64) -> f64 {
        let (b0, b1, tb) = segment(&self.batches, batch);
        let (c0, c1, tc) = segment(&self.contexts, context);
        let lo = lerp(self.at(b0, c0), self.at(b1, c0), tb);
        let hi = lerp(self.at(b0, c1), self.at(b1, c1), tb);
        lerp(lo, hi, tc).max(0.0)
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Bracketing knots and the (possibly out-of-range) fraction between them.
/// Outside the hull the edge segment is extended.
fn segment(knots: &[f64], x: f64) -> (usize, usize, f64) {
    if knots.len() == 1 {
        return (0, 0, 0.0);
    }
    let i = match knots.binary_search_by(|k| k.total_cmp(&x)) {
        Ok(i) => return (i, i, 0.0),
        Err(i) => i.clamp(1, knots.len() - 1) - 1,
    };
    let t = (x - knots[i]) / (knots[i + 1] - knots[i]);
    (i, i + 1, t)
}

/// Fills gaps in a line of cells by linear interpolation between the nearest
/// known neighbours, extending edge slopes outward.
fn fill_line(xs: &[f64], cells: &[Option<f64>]) -> Vec<Option<f64>> {
    let known: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].is_some()).collect();
    if known.is_empty() {
        return cells.to_vec();
    }
    if known.len() == 1 {
        return vec![cells[known[0]]; cells.len()];
    }
    (0..cells.len())
        .map(|i| {
            if cells[i].is_some() {
                return cells[i];
            }
            let hi = known.partition_point(|&k| k < i).clamp(1, known.len() - 1);
            let (a, b) = (known[hi - 1], known[hi]);
            let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
            Some(lerp(cells[a].unwrap(), cells[b].unwrap(), t))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    grids: BTreeMap<Op, OpGrid>,
}

impl CostTable {
    /// Builds a table from `(op, batch, context, time_us)` points. Duplicates
    /// keep the last value; use [`CostTable::read_csv`] for strict loading.
    pub fn from_points(points: &[(Op, f64, f64, f64)]) -> Result<Self, CostTableError> {
        let mut by_op: BTreeMap<Op, Vec<(f64, f64, f64)>> = BTreeMap::new();
        for &(op, b, c, t) in points {
            by_op.entry(op).or_default().push((b, c, t));
        }
        for op in Op::ALL {
            if !by_op.contains_key(&op) {
                return Err(CostTableError::MissingOp(op));
            }
        }
        let grids = by_op
            .into_iter()
            .map(|(op, pts)| (op, OpGrid::from_points(&pts)))
            .collect();
        Ok(Self { grids })
    }

    pub fn grid(&self, op: Op) -> &OpGrid {
        &self.grids[&op]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostTableError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn read_csv(reader: impl Read) -> Result<Self, CostTableError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut seen: BTreeMap<(Op, u64, u64), usize> = BTreeMap::new();
        let mut points = Vec::new();
        for (i, rec) in rdr.deserialize::<Row>().enumerate() {
            // Header is line 1.
            let line = i + 2;
            let row = rec.map_err(|e| CostTableError::Malformed {
                line,
                message: e.to_string(),
            })?;
            let op: Op = row
                .op
                .parse()
                .map_err(|name| CostTableError::UnknownOp { line, name })?;
            if row.time_us.is_nan() || row.time_us <= 0.0 {
                return Err(CostTableError::NonPositiveTime {
                    line,
                    time: row.time_us,
                });
            }
            if !(row.batch > 0.0 && row.context > 0.0) {
                return Err(CostTableError::BadCoordinate { line });
            }
            let key = (op, row.batch.to_bits(), row.context.to_bits());
            if let Some(&first) = seen.get(&key) {
                return Err(CostTableError::Duplicate {
                    line,
                    first,
                    op,
                    batch: row.batch,
                    context: row.context,
                });
            }
            seen.insert(key, line);
            points.push((op, row.batch, row.context, row.time_us));
        }
        Self::from_points(&points)
    }

    /// Writes every grid cell, measured or filled.
    pub fn write_csv(&self, writer: impl Write) -> Result<(), CostTableError> {
        let mut w = csv::Writer::from_writer(writer);
        for (op, g) in &self.grids {
            for (ci, &c) in g.contexts.iter().enumerate() {
                for (bi, &b) in g.batches.iter().enumerate() {
                    w.serialize(RowOut {
                        op: op.name(),
                        batch: b,
                        context: c,
                        time_us: g.at(bi, ci),
                    })
                    .map_err(|e| CostTableError::Malformed {
                        line: 0,
                        message: e.to_string(),
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CostTableError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

impl CostSource for CostTable {
    fn op_time(&self, op: Op, batch: f64, context: f64) -> f64 {
        self.grids[&op].lookup(batch, context)
    }
}
