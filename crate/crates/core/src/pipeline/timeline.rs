//! Per-layer span timelines for the three overlap strategies.
//!
//! Every strategy is a small DAG of spans. A span starts when all of its
//! dependencies have ended; the layer latency is the latest end.
//!
//! * `none`: pre_attn -> indexer -> {h2d, d2h} -> attn
//! * `da`: indexer -> {pre_attn -> attn0, h2d, d2h}; attn1 waits for attn0 and
//!   h2d; merge follows attn1
//! * `dba`: indexer (half A) -> {indexer_b, h2d (half A)}; pre_attn and h2d_b
//!   wait for both; attn0 follows pre_attn; attn1 waits for attn0 and h2d_b;
//!   merge follows attn1
//!
//! Without a duplex link, d2h queues behind the last h2d span.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::costmodel::{CostSource, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    Da,
    Dba,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::None, Strategy::Da, Strategy::Dba];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Da => "da",
            Strategy::Dba => "dba",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Indexer,
    IndexerB,
    PreAttn,
    Attn,
    Attn0,
    Attn1,
    Merge,
    H2d,
    H2dB,
    D2h,
}

impl SpanKind {
    pub fn name(self) -> &'static str {
        match self {
            SpanKind::Indexer => "indexer",
            SpanKind::IndexerB => "indexer_b",
            SpanKind::PreAttn => "pre_attn",
            SpanKind::Attn => "attn",
            SpanKind::Attn0 => "attn0",
            SpanKind::Attn1 => "attn1",
            SpanKind::Merge => "merge",
            SpanKind::H2d => "h2d",
            SpanKind::H2dB => "h2d_b",
            SpanKind::D2h => "d2h",
        }
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, SpanKind::H2d | SpanKind::H2dB | SpanKind::D2h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Span {
    pub kind: SpanKind,
    pub start_us: f64,
    pub end_us: f64,
}

impl Span {
    pub fn duration(&self) -> f64 {
        self.end_us - self.start_us
    }
}

/// Whole-batch compute costs of one layer, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerCosts {
    pub indexer_us: f64,
    pub pre_attn_us: f64,
    pub attn_us: f64,
    pub merge_us: f64,
    pub dense_us: f64,
    pub dispatch_us: f64,
    pub combine_us: f64,
}

impl LayerCosts {
    /// Prices one layer for `batch` requests of `width` verified tokens each.
    pub fn from_source(src: &dyn CostSource, batch: f64, width: f64, context: f64) -> Self {
        let arg = |op: Op| {
            if op.token_parallel() {
                batch * width
            } else {
                batch
            }
        };
        let t = |op: Op| src.op_time(op, arg(op), context);
        Self {
            indexer_us: t(Op::IndexerLogits) + t(Op::IndexerTopk),
            pre_attn_us: t(Op::PreAttn),
            attn_us: t(Op::SparseMla),
            merge_us: t(Op::MergeAttn),
            dense_us: t(Op::DenseMlp),
            dispatch_us: t(Op::MoeDispatch),
            combine_us: t(Op::MoeCombine),
        }
    }
}

/// Transfer work of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TransferLoad {
    /// Whole-batch prefetch time.
    pub h2d_us: f64,
    /// Whole-batch write-back time.
    pub d2h_us: f64,
    /// Share of each request's selected entries that missed, in `[0, 1]`.
    pub miss_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapParams {
    /// Share of the batch in the first DBA half.
    pub split: f64,
    /// Indexer cost inflation from splitting the batch.
    pub eta: f64,
    pub duplex: bool,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self {
            split: 0.5,
            eta: 1.15,
            duplex: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerTiming {
    pub strategy: Strategy,
    pub spans: Vec<Span>,
    pub layer_latency: f64,
    /// Latency added by transfers over the same schedule with free transfers.
    pub exposed_transfer: f64,
}

impl LayerTiming {
    pub fn span(&self, kind: SpanKind) -> Option<&Span> {
        self.spans.iter().find(|s| s.kind == kind)
    }
}

/// Fixed-capacity span list; start each span at the latest end among its
/// dependencies.
struct Sched {
    spans: [Span; 10],
    len: usize,
}

impl Sched {
    fn new() -> Self {
        Self {
            spans: [Span {
                kind: SpanKind::Indexer,
                start_us: 0.0,
                end_us: 0.0,
            }; 10],
            len: 0,
        }
    }

    fn end(&self, kind: SpanKind) -> f64 {
        self.spans[..self.len]
            .iter()
            .find(|s| s.kind == kind)
            .map(|s| s.end_us)
            .expect("dependency scheduled first")
    }

    fn add(&mut self, kind: SpanKind, duration: f64, deps: &[SpanKind]) -> f64 {
        let start = deps.iter().map(|&d| self.end(d)).fold(0.0, f64::max);
        let end = start + duration;
        self.spans[self.len] = Span {
            kind,
            start_us: start,
            end_us: end,
        };
        self.len += 1;
        end
    }

    fn latency(&self) -> f64 {
        self.spans[..self.len]
            .iter()
            .map(|s| s.end_us)
            .fold(0.0, f64::max)
    }
}

fn merge_cost(c: &LayerCosts, load: &TransferLoad) -> f64 {
    if load.miss_fraction > 0.0 {
        c.merge_us
    } else {
        0.0
    }
}

fn schedule(strategy: Strategy, c: &LayerCosts, load: &TransferLoad, p: &OverlapParams) -> Sched {
    use SpanKind::*;
    let mut s = Sched::new();
    let q = load.miss_fraction.clamp(0.0, 1.0);
    match strategy {
        Strategy::None => {
            s.add(PreAttn, c.pre_attn_us, &[]);
            s.add(Indexer, c.indexer_us, &[PreAttn]);
            s.add(H2d, load.h2d_us, &[Indexer]);
            if p.duplex {
                s.add(D2h, load.d2h_us, &[Indexer]);
            } else {
                s.add(D2h, load.d2h_us, &[H2d]);
            }
            s.add(Attn, c.attn_us, &[H2d, D2h]);
        }
        Strategy::Da => {
            s.add(Indexer, c.indexer_us, &[]);
            s.add(PreAttn, c.pre_attn_us, &[Indexer]);
            s.add(Attn0, c.attn_us * (1.0 - q), &[PreAttn]);
            s.add(H2d, load.h2d_us, &[Indexer]);
            s.add(D2h, load.d2h_us, if p.duplex { &[Indexer] } else { &[H2d] });
            s.add(Attn1, c.attn_us * q, &[Attn0, H2d]);
            s.add(Merge, merge_cost(c, load), &[Attn1]);
        }
        Strategy::Dba => {
            let f = p.split;
            s.add(Indexer, p.eta * f * c.indexer_us, &[]);
            s.add(IndexerB, p.eta * (1.0 - f) * c.indexer_us, &[Indexer]);
            s.add(H2d, f * load.h2d_us, &[Indexer]);
            s.add(PreAttn, c.pre_attn_us, &[IndexerB, H2d]);
            s.add(H2dB, (1.0 - f) * load.h2d_us, &[IndexerB, H2d]);
            s.add(
                D2h,
                load.d2h_us,
                if p.duplex { &[IndexerB] } else { &[H2dB] },
            );
            s.add(Attn0, c.attn_us * (1.0 - q), &[PreAttn]);
            s.add(Attn1, c.attn_us * q, &[Attn0, H2dB]);
            s.add(Merge, merge_cost(c, load), &[Attn1]);
        }
    }
    s
}

/// Latency without materializing spans.
pub fn layer_latency(
    strategy: Strategy,
    c: &LayerCosts,
    load: &TransferLoad,
    p: &OverlapParams,
) -> f64 {
    schedule(strategy, c, load, p).latency()
}

pub fn layer_time(
    strategy: Strategy,
    c: &LayerCosts,
    load: &TransferLoad,
    p: &OverlapParams,
) -> LayerTiming {
    let s = schedule(strategy, c, load, p);
    let free = TransferLoad {
        h2d_us: 0.0,
        d2h_us: 0.0,
        ..*load
    };
    let latency = s.latency();
    let exposed = (latency - layer_latency(strategy, c, &free, p)).max(0.0);
    LayerTiming {
        strategy,
        spans: s.spans[..s.len].to_vec(),
        layer_latency: latency,
        exposed_transfer: exposed,
    }
}

pub fn layer_time_none(c: &LayerCosts, load: &TransferLoad, p: &OverlapParams) -> LayerTiming {
    layer_time(Strategy::None, c, load, p)
}

pub fn layer_time_da(c: &LayerCosts, load: &TransferLoad, p: &OverlapParams) -> LayerTiming {
    layer_time(Strategy::Da, c, load, p)
}

pub fn layer_time_dba(c: &LayerCosts, load: &TransferLoad, p: &OverlapParams) -> LayerTiming {
    layer_time(Strategy::Dba, c, load, p)
}

/// Two-Batch Overlap: the two micro-batches pipeline expert-parallel
/// communication against compute at a fractional `overhead` of compute.
pub fn apply_tbo(compute_us: f64, comm_us: f64, enabled: bool, overhead: f64) -> f64 {
    if enabled {
        compute_us.max(comm_us) + overhead * compute_us
    } else {
        compute_us + comm_us
    }
}
