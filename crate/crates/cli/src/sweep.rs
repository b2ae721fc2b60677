//! Scenario grids.
//!
//! Points are the cartesian product of the axes, ordered with context
//! outermost, then MTP setting, overlap policy, ratio and batch. Traces are
//! generated once per (context, accept) and replayed once per ratio; every
//! point reuses the matching replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use sparsepool::cache::{replay, MissProfile, WarmStart};
use sparsepool::pipeline::{check_trace_shape, decode_from_profile, warm_start_for, DecodeReport};
use sparsepool::scenario::{config_violations, OverlapPolicy, Scenario};
use sparsepool::trace::{generate_trace, read_trace, AccessTrace, TraceGenParams};

use crate::{create_dir, load_costs, parse_toml, write_csv, CliError, Globals};

pub const DEFAULT_MAX_POINTS: usize = 10_000;

pub const REPORT_FILE: &str = "sweep_report.csv";
pub const THROUGHPUT_FILE: &str = "throughput_vs_batch.csv";
pub const MISS_FILE: &str = "miss_vs_ratio.csv";
pub const WARMUP_FILE: &str = "warmup_effect.csv";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub axes: SweepAxes,
    #[serde(default)]
    pub trace: TraceSource,
    /// Cost table; relative paths resolve against the spec file.
    pub profile: Option<PathBuf>,
    /// Output directory when `--out` is not given.
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_max_points")]
    pub max_points: usize,
    /// Relative slack on the memory capacity before a point is infeasible.
    #[serde(default)]
    pub memory_slack: f64,
}

fn default_max_points() -> usize {
    DEFAULT_MAX_POINTS
}

/// Values per axis; an absent axis takes the base scenario's value.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub batch_size: Option<Vec<u32>>,
    pub sparse_ratio: Option<Vec<f64>>,
    pub context_len: Option<Vec<u64>>,
    pub mtp: Option<Vec<MtpSetting>>,
    pub overlap_policy: Option<Vec<OverlapPolicy>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtpSetting {
    pub mtp_width: u32,
    pub accept_ratio: f64,
    #[serde(default)]
    pub token_width: Option<f64>,
}

/// A trace file used for every point, or generator parameters whose shape
/// fields (layers, context, top-k, accept mean) are set per point.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub generator: TraceGenParams,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut spec: Self = parse_toml(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut().filter(|x| x.is_relative()) {
                *x = base.join(&*x);
            }
        };
        resolve(&mut spec.trace.file);
        resolve(&mut spec.profile);
        resolve(&mut spec.out_dir);
        Ok(spec)
    }
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: T) -> Result<Vec<T>, CliError> {
    match values {
        Some(v) if v.is_empty() => Err(CliError::Sweep(format!("axis `{name}` is empty"))),
        Some(v) => Ok(v.clone()),
        None => Ok(vec![base]),
    }
}

/// Scenarios for every point, in point order.
pub fn expand_points(spec: &SweepSpec, base: &Scenario) -> Result<Vec<Scenario>, CliError> {
    let a = &spec.axes;
    let d = &base.deployment;
    let contexts = axis("context_len", &a.context_len, d.context_len)?;
    let mtps = axis(
        "mtp",
        &a.mtp,
        MtpSetting {
            mtp_width: base.model.mtp_width,
            accept_ratio: base.model.accept_ratio,
            token_width: base.model.token_width,
        },
    )?;
    let policies = axis("overlap_policy", &a.overlap_policy, d.overlap_policy)?;
    let ratios = axis("sparse_ratio", &a.sparse_ratio, d.sparse_ratio)?;
    let batches = axis("batch_size", &a.batch_size, d.batch_size)?;

    let points = [
        contexts.len(),
        mtps.len(),
        policies.len(),
        ratios.len(),
        batches.len(),
    ]
    .iter()
    .try_fold(1usize, |acc, &n| acc.checked_mul(n))
    .unwrap_or(usize::MAX);
    if points > spec.max_points {
        return Err(CliError::TooManyPoints {
            points,
            cap: spec.max_points,
        });
    }

    let mut out = Vec::with_capacity(points);
    for &context in &contexts {
        for m in &mtps {
            for &policy in &policies {
                for &ratio in &ratios {
                    for &batch in &batches {
                        let mut s = base.clone();
                        s.deployment.context_len = context;
                        s.model.mtp_width = m.mtp_width;
                        s.model.accept_ratio = m.accept_ratio;
                        s.model.token_width = m.token_width;
                        s.deployment.overlap_policy = policy;
                        s.deployment.sparse_ratio = ratio;
                        s.deployment.batch_size = batch;
                        out.push(s);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reason a point cannot run, if any.
fn infeasibility(s: &Scenario, memory_slack: f64) -> Option<String> {
    let violations = config_violations(s);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Some(text.join("; "));
    }
    match s.max_batch_size() {
        Ok(max) if f64::from(s.deployment.batch_size) <= f64::from(max) * (1.0 + memory_slack) => {
            None
        }
        Ok(max) => Some(format!(
            "batch {} exceeds memory capacity {max} at ratio {}",
            s.deployment.batch_size, s.deployment.sparse_ratio
        )),
        Err(e) => Some(e.to_string()),
    }
}

fn generator_for(spec: &SweepSpec, g: &Globals, s: &Scenario) -> TraceGenParams {
    let ctx = s.deployment.context_len;
    TraceGenParams {
        num_layers: s.model.num_layers,
        context_len: ctx,
        topk: s.model.effective_topk(ctx),
        mean_accept: s.model.accept_ratio,
        seed: g.seed.unwrap_or(spec.trace.generator.seed),
        ..spec.trace.generator.clone()
    }
}

type TraceKey = (u32, u64, u32, u64);

fn trace_key(p: &TraceGenParams) -> TraceKey {
    (p.num_layers, p.context_len, p.topk, p.mean_accept.to_bits())
}

struct Replayed {
    trace: usize,
    ratio: f64,
    warm: WarmStart,
    profile: MissProfile,
    cold: Option<MissProfile>,
}

#[derive(Serialize)]
struct ReportRow {
    point: usize,
    feasible: bool,
    note: String,
    batch: u32,
    ratio: f64,
    context: u64,
    mtp: u32,
    accept: f64,
    policy: String,
    mean_iter_us: Option<f64>,
    otps: Option<f64>,
    throughput: Option<f64>,
    mean_misses_per_request: Option<f64>,
    warm_start: Option<WarmStart>,
}

#[derive(Serialize)]
struct ThroughputRow {
    context: u64,
    mtp: u32,
    accept: f64,
    policy: String,
    ratio: f64,
    batch: u32,
    throughput: f64,
    otps: f64,
}

#[derive(Serialize)]
struct MissRow {
    context: u64,
    accept: f64,
    ratio: f64,
    warm_start: WarmStart,
    mean_misses_per_request: f64,
}

#[derive(Serialize)]
struct WarmupRow {
    context: u64,
    accept: f64,
    ratio: f64,
    step: usize,
    cold_misses: f64,
    warm_misses: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub points: usize,
    pub feasible: usize,
    pub out_dir: PathBuf,
}

/// Mean misses per request per layer at step `t`.
fn step_mean(p: &MissProfile, t: usize) -> f64 {
    let sum: u64 = p.step(t).iter().map(|&m| u64::from(m)).sum();
    sum as f64 / (p.num_layers().max(1) as f64 * f64::from(p.requests.max(1)))
}

pub fn run_sweep(g: &Globals, spec_path: &Path) -> Result<SweepSummary, CliError> {
    let spec = SweepSpec::load(spec_path)?;
    let base = g.scenario()?;
    let out_dir = g
        .out
        .clone()
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| g.out_dir());
    let costs = load_costs(spec.profile.as_deref().or(g.profile.as_deref()))?;
    let points = expand_points(&spec, &base)?;

    // Trace per point, generated once per distinct shape.
    let mut notes: Vec<Option<String>> = points
        .iter()
        .map(|s| infeasibility(s, spec.memory_slack))
        .collect();
    let mut traces: Vec<Option<AccessTrace>> = Vec::new();
    let mut point_trace: Vec<Option<usize>> = vec![None; points.len()];
    if let Some(file) = &spec.trace.file {
        let trace = read_trace(file)?;
        for (i, s) in points.iter().enumerate() {
            if notes[i].is_some() {
                continue;
            }
            match check_trace_shape(s, &trace) {
                Ok(()) => point_trace[i] = Some(0),
                Err(e) => notes[i] = Some(e.to_string()),
            }
        }
        traces.push(Some(trace));
    } else {
        let mut keys: BTreeMap<TraceKey, usize> = BTreeMap::new();
        let mut params: Vec<TraceGenParams> = Vec::new();
        for (i, s) in points.iter().enumerate() {
            if notes[i].is_some() {
                continue;
            }
            let p = generator_for(&spec, g, s);
            let next = params.len();
            let idx = *keys.entry(trace_key(&p)).or_insert(next);
            if idx == next {
                params.push(p);
            }
            point_trace[i] = Some(idx);
        }
        let generated: Vec<_> = params.par_iter().map(generate_trace).collect();
        for (i, t) in point_trace.iter_mut().enumerate() {
            if let Some(idx) = *t {
                if let Err(e) = &generated[idx] {
                    notes[i] = Some(e.to_string());
                    *t = None;
                }
            }
        }
        traces = generated.into_iter().map(Result::ok).collect();
    }

    // One replay per (trace, ratio), in first-use order.
    let mut jobs: Vec<(usize, u64)> = Vec::new();
    for (i, s) in points.iter().enumerate() {
        if let Some(t) = point_trace[i] {
            let key = (t, s.deployment.sparse_ratio.to_bits());
            if !jobs.contains(&key) {
                jobs.push(key);
            }
        }
    }
    let replayed: Vec<Replayed> = jobs
        .par_iter()
        .map(|&(t, bits)| {
            let trace = traces[t].as_ref().expect("traced points have a trace");
            let ratio = f64::from_bits(bits);
            let warm = warm_start_for(ratio, trace);
            let profile = replay(trace, ratio, warm)?;
            let cold = match warm {
                WarmStart::PrefillWindows => Some(replay(trace, ratio, WarmStart::Cold)?),
                _ => None,
            };
            Ok(Replayed {
                trace: t,
                ratio,
                warm,
                profile,
                cold,
            })
        })
        .collect::<Result<_, CliError>>()?;
    let accepted: Vec<Vec<u16>> = traces
        .iter()
        .map(|t| {
            t.as_ref()
                .map(|t| t.steps.iter().map(|s| s.tokens_accepted).collect())
                .unwrap_or_default()
        })
        .collect();

    let reports: Vec<Option<DecodeReport>> = points
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let Some(t) = point_trace[i] else {
                return Ok(None);
            };
            let bits = s.deployment.sparse_ratio.to_bits();
            let r = replayed
                .iter()
                .find(|r| r.trace == t && r.ratio.to_bits() == bits)
                .expect("replay scheduled for every traced point");
            decode_from_profile(s, &costs, &r.profile, &accepted[t], r.warm).map(Some)
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::with_capacity(points.len());
    let mut throughput = Vec::new();
    for (i, (s, rep)) in points.iter().zip(&reports).enumerate() {
        let policy = s.deployment.overlap_policy.to_string();
        if let Some(r) = rep {
            throughput.push(ThroughputRow {
                context: r.context,
                mtp: r.mtp,
                accept: r.accept,
                policy: policy.clone(),
                ratio: r.ratio,
                batch: r.batch,
                throughput: r.throughput,
                otps: r.otps,
            });
        }
        rows.push(ReportRow {
            point: i,
            feasible: rep.is_some(),
            note: notes[i].clone().unwrap_or_default(),
            batch: s.deployment.batch_size,
            ratio: s.deployment.sparse_ratio,
            context: s.deployment.context_len,
            mtp: s.model.mtp_width,
            accept: s.model.accept_ratio,
            policy,
            mean_iter_us: rep.as_ref().map(|r| r.mean_iter_us),
            otps: rep.as_ref().map(|r| r.otps),
            throughput: rep.as_ref().map(|r| r.throughput),
            mean_misses_per_request: rep.as_ref().map(|r| r.mean_misses_per_request),
            warm_start: rep.as_ref().map(|r| r.warm_start),
        });
    }

    let mut misses = Vec::new();
    let mut warmup = Vec::new();
    for r in &replayed {
        let trace = traces[r.trace].as_ref().expect("replayed traces exist");
        let accept = accept_of(&points, &point_trace, r.trace);
        misses.push(MissRow {
            context: trace.context_len,
            accept,
            ratio: r.ratio,
            warm_start: r.warm,
            mean_misses_per_request: r.profile.aggregate_mean() / f64::from(r.profile.requests),
        });
        if let Some(cold) = &r.cold {
            for t in 0..r.profile.num_steps() {
                warmup.push(WarmupRow {
                    context: trace.context_len,
                    accept,
                    ratio: r.ratio,
                    step: t,
                    cold_misses: step_mean(cold, t),
                    warm_misses: step_mean(&r.profile, t),
                });
            }
        }
    }

    create_dir(&out_dir)?;
    write_csv(&out_dir.join(REPORT_FILE), &rows)?;
    write_csv(&out_dir.join(THROUGHPUT_FILE), &throughput)?;
    write_csv(&out_dir.join(MISS_FILE), &misses)?;
    write_csv(&out_dir.join(WARMUP_FILE), &warmup)?;
    Ok(SweepSummary {
        points: points.len(),
        feasible: throughput.len(),
        out_dir,
    })
}

/// Accept ratio of the first point using trace `t`.
fn accept_of(points: &[Scenario], point_trace: &[Option<usize>], t: usize) -> f64 {
    points
        .iter()
        .zip(point_trace)
        .find(|(_, pt)| **pt == Some(t))
        .map_or(0.0, |(s, _)| s.model.accept_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(text: &str) -> SweepSpec {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn axes_expand_in_point_order() {
        let s = spec("[axes]\nbatch_size = [1, 2]\nsparse_ratio = [1.0, 0.5]\n");
        let pts = expand_points(&s, &Scenario::default()).unwrap();
        let got: Vec<(f64, u32)> = pts
            .iter()
            .map(|p| (p.deployment.sparse_ratio, p.deployment.batch_size))
            .collect();
        assert_eq!(got, vec![(1.0, 1), (1.0, 2), (0.5, 1), (0.5, 2)]);
    }

    #[test]
    fn empty_axis_is_rejected() {
        let s = spec("[axes]\nbatch_size = []\n");
        assert!(matches!(
            expand_points(&s, &Scenario::default()),
            Err(CliError::Sweep(_))
        ));
    }

    #[test]
    fn point_cap_is_enforced() {
        let s = spec("max_points = 3\n[axes]\nbatch_size = [1, 2]\nsparse_ratio = [1.0, 0.5]\n");
        assert!(matches!(
            expand_points(&s, &Scenario::default()),
            Err(CliError::TooManyPoints { points: 4, cap: 3 })
        ));
    }

    #[test]
    fn over_capacity_batch_is_infeasible() {
        let mut s = Scenario::default();
        s.deployment.batch_size = 53;
        assert!(infeasibility(&s, 0.0).unwrap().contains("exceeds memory"));
        assert_eq!(infeasibility(&s, 0.02), None);
        s.deployment.batch_size = 52;
        assert_eq!(infeasibility(&s, 0.0), None);
    }

    #[test]
    fn policies_parse_from_strings() {
        let s = spec("[axes]\noverlap_policy = [\"da\", \"layerwise:512\"]\n");
        assert_eq!(
            s.axes.overlap_policy.unwrap(),
            vec![OverlapPolicy::Da, OverlapPolicy::Layerwise(512.0)]
        );
    }
}
