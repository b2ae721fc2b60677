//! Iteration timelines under the overlap strategies, Two-Batch Overlap and
//! decode-level throughput.

mod decode;
mod plan;
mod timeline;

pub use decode::{
    check_trace_shape, decode_from_profile, find_crossover, iteration_latency,
    mean_iteration_latency, simulate_decode, simulate_iteration, timeline_spans, warm_start_for,
    Crossover, DecodeReport, IterationResult, IterationSetup, LayerBreakdown, PipelineError,
    TimelineSpan, REPORT_CSV_HEADER,
};
pub use plan::{plan_layers, LayerPlan};
pub use timeline::{
    apply_tbo, layer_latency, layer_time, layer_time_da, layer_time_dba, layer_time_none,
    LayerCosts, LayerTiming, OverlapParams, Span, SpanKind, Strategy, TransferLoad,
};
