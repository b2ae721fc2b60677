//! Iteration and decode simulation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use super::plan::LayerPlan;
use super::timeline::{
    apply_tbo, layer_latency, layer_time, LayerCosts, LayerTiming, OverlapParams, Strategy,
    TransferLoad,
};
use crate::cache::{replay, CacheError, MissProfile, WarmStart};
use crate::costmodel::{CostSource, Direction, TransferModel};
use crate::scenario::Scenario;
use crate::trace::AccessTrace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("trace {what} is {found}, scenario expects {expected}")]
    ShapeMismatch {
        what: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("plan covers {found} layers, expected {expected}")]
    PlanLength { expected: usize, found: usize },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Everything one iteration needs besides miss counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationSetup {
    pub costs: LayerCosts,
    pub transfer: TransferModel,
    pub overlap: OverlapParams,
    pub tbo_enabled: bool,
    pub tbo_overhead: f64,
    pub batch: u32,
    /// Entries each request selects per layer.
    pub topk: u32,
}

impl IterationSetup {
    pub fn from_scenario(s: &Scenario, src: &dyn CostSource) -> Self {
        let d = &s.deployment;
        Self {
            costs: LayerCosts::from_source(
                src,
                f64::from(d.batch_size),
                s.model.width(),
                d.context_len as f64,
            ),
            transfer: s.transfer_model(),
            overlap: OverlapParams {
                split: d.dba_split,
                eta: d.indexer_split_eta,
                duplex: s.hardware.pcie_duplex,
            },
            tbo_enabled: d.tbo_enabled,
            tbo_overhead: d.tbo_overhead,
            batch: d.batch_size,
            topk: s.model.effective_topk(d.context_len),
        }
    }

    /// Transfer work for one layer given the mean misses per request and the
    /// whole-batch write-back block count.
    pub fn load(&self, misses_per_request: f64, write_back_blocks: f64) -> TransferLoad {
        let batch = f64::from(self.batch);
        TransferLoad {
            h2d_us: self
                .transfer
                .transfer_time(batch * misses_per_request, Direction::H2d),
            d2h_us: self
                .transfer
                .transfer_time(write_back_blocks, Direction::D2h),
            miss_fraction: (misses_per_request / f64::from(self.topk.max(1))).min(1.0),
        }
    }

    /// One layer's contribution to iteration latency, TBO included.
    pub fn layer_total(&self, attn_block_us: f64) -> f64 {
        apply_tbo(
            attn_block_us + self.costs.dense_us,
            self.costs.dispatch_us + self.costs.combine_us,
            self.tbo_enabled,
            self.tbo_overhead,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationResult {
    pub layers: Vec<LayerTiming>,
    /// Per-layer time including dense and MoE work.
    pub layer_totals: Vec<f64>,
    pub latency_us: f64,
}

pub fn simulate_iteration(
    setup: &IterationSetup,
    misses_per_request: &[f64],
    write_back_blocks: f64,
    plan: &LayerPlan,
) -> Result<IterationResult, PipelineError> {
    check_plan(plan, misses_per_request.len())?;
    let layers: Vec<LayerTiming> = misses_per_request
        .iter()
        .zip(&plan.strategies)
        .map(|(&m, &s)| {
            layer_time(
                s,
                &setup.costs,
                &setup.load(m, write_back_blocks),
                &setup.overlap,
            )
        })
        .collect();
    let layer_totals: Vec<f64> = layers
        .iter()
        .map(|t| setup.layer_total(t.layer_latency))
        .collect();
    Ok(IterationResult {
        latency_us: layer_totals.iter().sum(),
        layers,
        layer_totals,
    })
}

/// Iteration latency without building span lists.
pub fn iteration_latency(
    setup: &IterationSetup,
    misses_per_request: &[f64],
    write_back_blocks: f64,
    plan: &LayerPlan,
) -> f64 {
    misses_per_request
        .iter()
        .zip(&plan.strategies)
        .map(|(&m, &s)| {
            let load = setup.load(m, write_back_blocks);
            setup.layer_total(layer_latency(s, &setup.costs, &load, &setup.overlap))
        })
        .sum()
}

fn check_plan(plan: &LayerPlan, layers: usize) -> Result<(), PipelineError> {
    if plan.strategies.len() != layers {
        return Err(PipelineError::PlanLength {
            expected: layers,
            found: plan.strategies.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBreakdown {
    pub layer: usize,
    pub strategy: Strategy,
    pub mean_misses_per_request: f64,
    pub mean_attn_block_us: f64,
    pub mean_exposed_transfer_us: f64,
    pub mean_total_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeReport {
    pub batch: u32,
    pub ratio: f64,
    pub context: u64,
    pub mtp: u32,
    pub accept: f64,
    pub replication: u32,
    pub warm_start: WarmStart,
    pub step_latency_us: Vec<f64>,
    pub mean_iter_us: f64,
    /// Tokens per second per request.
    pub otps: f64,
    /// Tokens per second across the batch and all replicas.
    pub throughput: f64,
    pub mean_misses_per_request: f64,
    pub layers: Vec<LayerBreakdown>,
    /// Layers assigned to each strategy.
    pub strategy_layers: BTreeMap<Strategy, usize>,
    /// Exposed transfer time per iteration, summed by strategy.
    pub strategy_exposed_us: BTreeMap<Strategy, f64>,
}

#[derive(Serialize)]
struct ReportRow {
    batch: u32,
    ratio: f64,
    context: u64,
    mtp: u32,
    accept: f64,
    mean_iter_us: f64,
    otps: f64,
    throughput: f64,
}

pub const REPORT_CSV_HEADER: [&str; 8] = [
    "batch",
    "ratio",
    "context",
    "mtp",
    "accept",
    "mean_iter_us",
    "otps",
    "throughput",
];

impl DecodeReport {
    pub fn write_csv_row<W: Write>(&self, w: &mut csv::Writer<W>) -> csv::Result<()> {
        w.serialize(ReportRow {
            batch: self.batch,
            ratio: self.ratio,
            context: self.context,
            mtp: self.mtp,
            accept: self.accept,
            mean_iter_us: self.mean_iter_us,
            otps: self.otps,
            throughput: self.throughput,
        })
    }
}

/// Warm start used for a ratio: everything resident at 1.0, otherwise the
/// prefill windows when the trace carries them.
pub fn warm_start_for(ratio: f64, trace: &AccessTrace) -> WarmStart {
    if ratio >= 1.0 {
        WarmStart::FullHistory
    } else if trace.prefill_windows.is_some() {
        WarmStart::PrefillWindows
    } else {
        WarmStart::Cold
    }
}

pub fn check_trace_shape(s: &Scenario, trace: &AccessTrace) -> Result<(), PipelineError> {
    let checks = [
        (
            "layer count",
            u64::from(s.model.num_layers),
            u64::from(trace.num_layers),
        ),
        (
            "context length",
            s.deployment.context_len,
            trace.context_len,
        ),
        (
            "top-k",
            u64::from(s.model.effective_topk(s.deployment.context_len)),
            u64::from(trace.topk),
        ),
    ];
    for (what, expected, found) in checks {
        if expected != found {
            return Err(PipelineError::ShapeMismatch {
                what,
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Replays `trace` at the scenario's ratio and simulates every step.
pub fn simulate_decode(
    s: &Scenario,
    trace: &AccessTrace,
    costs: &dyn CostSource,
) -> Result<DecodeReport, PipelineError> {
    check_trace_shape(s, trace)?;
    let ratio = s.deployment.sparse_ratio;
    let warm = warm_start_for(ratio, trace);
    let profile = replay(trace, ratio, warm)?;
    let accepted: Vec<u16> = trace.steps.iter().map(|st| st.tokens_accepted).collect();
    decode_from_profile(s, costs, &profile, &accepted, warm)
}

/// Simulates decode from a precomputed miss profile. Profiles summed over
/// fewer requests than the batch are scaled up by their per-request mean.
pub fn decode_from_profile(
    s: &Scenario,
    costs: &dyn CostSource,
    profile: &MissProfile,
    accepted: &[u16],
    warm: WarmStart,
) -> Result<DecodeReport, PipelineError> {
    let setup = IterationSetup::from_scenario(s, costs);
    let layers = s.model.num_layers as usize;
    if profile.num_layers() != layers {
        return Err(PipelineError::ShapeMismatch {
            what: "profile layer count",
            expected: layers as u64,
            found: profile.num_layers() as u64,
        });
    }
    let requests = f64::from(profile.requests.max(1));
    let means: Vec<f64> = profile.layer_means().iter().map(|m| m / requests).collect();
    let plan = LayerPlan::for_policy(s.deployment.overlap_policy, &means, "replay");

    let steps = profile.num_steps();
    let batch = f64::from(s.deployment.batch_size);
    let mut step_latency_us = Vec::with_capacity(steps);
    let mut attn_sum = vec![0.0; layers];
    let mut exposed_sum = vec![0.0; layers];
    let mut total_sum = vec![0.0; layers];
    let mut misses = vec![0.0; layers];
    for t in 0..steps {
        for (l, m) in misses.iter_mut().enumerate() {
            *m = f64::from(profile.misses[l][t]) / requests;
        }
        let write_back = batch * f64::from(accepted.get(t).copied().unwrap_or(0));
        let it = simulate_iteration(&setup, &misses, write_back, &plan)?;
        for l in 0..layers {
            attn_sum[l] += it.layers[l].layer_latency;
            exposed_sum[l] += it.layers[l].exposed_transfer;
            total_sum[l] += it.layer_totals[l];
        }
        step_latency_us.push(it.latency_us);
    }

    let n = steps.max(1) as f64;
    let mean_iter_us = step_latency_us.iter().sum::<f64>() / n;
    let accept = s.model.accept_ratio;
    let otps = if mean_iter_us > 0.0 {
        accept / (mean_iter_us * 1e-6)
    } else {
        0.0
    };
    let replication = s.hardware.replication;
    let throughput = f64::from(replication) * batch * otps;

    let mut strategy_layers = BTreeMap::new();
    let mut strategy_exposed_us = BTreeMap::new();
    let layers_out: Vec<LayerBreakdown> = (0..layers)
        .map(|l| {
            let strategy = plan.strategies[l];
            *strategy_layers.entry(strategy).or_insert(0) += 1;
            *strategy_exposed_us.entry(strategy).or_insert(0.0) += exposed_sum[l] / n;
            LayerBreakdown {
                layer: l,
                strategy,
                mean_misses_per_request: means[l],
                mean_attn_block_us: attn_sum[l] / n,
                mean_exposed_transfer_us: exposed_sum[l] / n,
                mean_total_us: total_sum[l] / n,
            }
        })
        .collect();

    Ok(DecodeReport {
        batch: s.deployment.batch_size,
        ratio: s.deployment.sparse_ratio,
        context: s.deployment.context_len,
        mtp: s.model.mtp_width,
        accept,
        replication,
        warm_start: warm,
        step_latency_us,
        mean_iter_us,
        otps,
        throughput,
        mean_misses_per_request: means.iter().sum::<f64>() / means.len().max(1) as f64,
        layers: layers_out,
        strategy_layers,
        strategy_exposed_us,
    })
}

/// Mean iteration latency from a profile, without span bookkeeping.
pub fn mean_iteration_latency(
    s: &Scenario,
    costs: &dyn CostSource,
    profile: &MissProfile,
    accepted: &[u16],
) -> f64 {
    let setup = IterationSetup::from_scenario(s, costs);
    let requests = f64::from(profile.requests.max(1));
    let means: Vec<f64> = profile.layer_means().iter().map(|m| m / requests).collect();
    let plan = LayerPlan::for_policy(s.deployment.overlap_policy, &means, "replay");
    let batch = f64::from(s.deployment.batch_size);
    let steps = profile.num_steps();
    let mut misses = vec![0.0; profile.num_layers()];
    let mut total = 0.0;
    for t in 0..steps {
        for (l, m) in misses.iter_mut().enumerate() {
            *m = f64::from(profile.misses[l][t]) / requests;
        }
        let write_back = batch * f64::from(accepted.get(t).copied().unwrap_or(0));
        total += iteration_latency(&setup, &misses, write_back, &plan);
    }
    total / steps.max(1) as f64
}

/// One span of an iteration timeline, offset by the layers before it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineSpan {
    pub layer: usize,
    pub span: &'static str,
    pub start_us: f64,
    pub end_us: f64,
    pub strategy: Strategy,
}

pub fn timeline_spans(it: &IterationResult) -> Vec<TimelineSpan> {
    let mut offset = 0.0;
    let mut out = Vec::new();
    for (l, (timing, total)) in it.layers.iter().zip(&it.layer_totals).enumerate() {
        for s in &timing.spans {
            out.push(TimelineSpan {
                layer: l,
                span: s.kind.name(),
                start_us: offset + s.start_us,
                end_us: offset + s.end_us,
                strategy: timing.strategy,
            });
        }
        offset += total;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Crossover {
    /// Smallest scanned miss count from which DBA stays strictly faster.
    pub threshold: Option<u32>,
    /// Whether the sign of `dba - da` changes at most once over the scan.
    pub single_switch: bool,
    pub max_scanned: u32,
}

/// Scans per-request miss counts `0..=max_misses` for the DA/DBA crossover.
pub fn find_crossover(
    setup: &IterationSetup,
    write_back_blocks: f64,
    max_misses: u32,
) -> Crossover {
    let faster: Vec<bool> = (0..=max_misses)
        .map(|m| {
            let load = setup.load(f64::from(m), write_back_blocks);
            let da = layer_latency(Strategy::Da, &setup.costs, &load, &setup.overlap);
            let dba = layer_latency(Strategy::Dba, &setup.costs, &load, &setup.overlap);
            dba < da
        })
        .collect();
    let switches = faster.windows(2).filter(|w| w[0] != w[1]).count();
    let single_switch = switches == 0 || (switches == 1 && !faster[0]);
    let threshold = faster
        .iter()
        .rposition(|&f| !f)
        .map_or(Some(0), |last_slow| {
            let t = last_slow as u32 + 1;
            (t <= max_misses).then_some(t)
        });
    Crossover {
        threshold,
        single_switch,
        max_scanned: max_misses,
    }
}
