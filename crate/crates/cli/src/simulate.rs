//! `simulate`: one decode run with report, miss profile, span timeline and
//! DA/DBA crossover exports.

use serde::Serialize;

use sparsepool::cache::replay;
use sparsepool::pipeline::{
    check_trace_shape, decode_from_profile, find_crossover, simulate_iteration, timeline_spans,
    warm_start_for, Crossover, IterationSetup, LayerPlan, TimelineSpan,
};
use sparsepool::scenario::{config_violations, memory_violation, Scenario};
use sparsepool::trace::{generate_trace, read_trace, AccessTrace, TraceGenParams};

use crate::{
    create_dir, create_file, parse_toml, write_json, CliError, Globals, Outcome, SimulateArgs,
};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const MISS_PROFILE_FILE: &str = "miss_profile.csv";
pub const TIMELINE_FILE: &str = "timeline.json";
pub const CROSSOVER_FILE: &str = "crossover.json";

#[derive(Serialize)]
struct Timeline {
    step: usize,
    latency_us: f64,
    spans: Vec<TimelineSpan>,
}

/// Generator parameters shaped to the scenario.
pub fn scenario_trace_params(
    s: &Scenario,
    base: TraceGenParams,
    seed: Option<u64>,
) -> TraceGenParams {
    let ctx = s.deployment.context_len;
    TraceGenParams {
        num_layers: s.model.num_layers,
        context_len: ctx,
        topk: s.model.effective_topk(ctx),
        mean_accept: s.model.accept_ratio,
        seed: seed.unwrap_or(base.seed),
        ..base
    }
}

fn load_trace(g: &Globals, s: &Scenario, args: &SimulateArgs) -> Result<AccessTrace, CliError> {
    if let Some(p) = &args.trace {
        return Ok(read_trace(p)?);
    }
    let base = match &args.trace_params {
        Some(p) => parse_toml(p)?,
        None => TraceGenParams::default(),
    };
    Ok(generate_trace(&scenario_trace_params(s, base, g.seed))?)
}

pub fn run(g: &Globals, args: &SimulateArgs) -> Result<Outcome, CliError> {
    let s = g.scenario()?;
    let violations = config_violations(&s);
    if !violations.is_empty() {
        let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(CliError::Argument(format!("scenario: {}", text.join("; "))));
    }
    let costs = g.costs()?;
    let trace = load_trace(g, &s, args)?;
    check_trace_shape(&s, &trace)?;
    if args.timeline_step >= trace.num_steps() {
        return Err(CliError::Argument(format!(
            "timeline step {} outside a {}-step trace",
            args.timeline_step,
            trace.num_steps()
        )));
    }

    let ratio = s.deployment.sparse_ratio;
    let warm = warm_start_for(ratio, &trace);
    let profile = replay(&trace, ratio, warm)?;
    let accepted: Vec<u16> = trace.steps.iter().map(|st| st.tokens_accepted).collect();
    let report = decode_from_profile(&s, &costs, &profile, &accepted, warm)?;

    let setup = IterationSetup::from_scenario(&s, &costs);
    let means: Vec<f64> = report
        .layers
        .iter()
        .map(|l| l.mean_misses_per_request)
        .collect();
    let plan = LayerPlan::for_policy(s.deployment.overlap_policy, &means, "replay");
    let t = args.timeline_step;
    let per_request = f64::from(profile.requests.max(1));
    let misses: Vec<f64> = profile
        .step(t)
        .iter()
        .map(|&m| f64::from(m) / per_request)
        .collect();
    let write_back = f64::from(s.deployment.batch_size) * f64::from(accepted[t]);
    let iteration = simulate_iteration(&setup, &misses, write_back, &plan)?;
    let crossover: Crossover = find_crossover(&setup, write_back, setup.topk);

    let out = g.out_dir();
    create_dir(&out)?;
    {
        let mut w = csv::Writer::from_writer(create_file(&out.join(REPORT_CSV))?);
        report.write_csv_row(&mut w)?;
        w.flush().map_err(|source| CliError::Io {
            path: out.join(REPORT_CSV),
            source,
        })?;
    }
    write_json(&out.join(REPORT_JSON), &report)?;
    profile.write_summary_csv(create_file(&out.join(MISS_PROFILE_FILE))?)?;
    write_json(
        &out.join(TIMELINE_FILE),
        &Timeline {
            step: t,
            latency_us: iteration.latency_us,
            spans: timeline_spans(&iteration),
        },
    )?;
    write_json(&out.join(CROSSOVER_FILE), &crossover)?;

    if let Some(v) = memory_violation(&s) {
        println!("warning: {v}");
    }
    println!(
        "decode: batch {} ratio {} context {} mtp {}: iter {:.3} ms, otps {:.3}, throughput {:.2} tokens/s",
        report.batch,
        report.ratio,
        report.context,
        report.mtp,
        report.mean_iter_us / 1e3,
        report.otps,
        report.throughput
    );
    println!(
        "misses: {:.2} per request per layer ({:?} warm start)",
        report.mean_misses_per_request, report.warm_start
    );
    match crossover.threshold {
        Some(m) => println!("crossover: dba faster from {m} misses per request"),
        None => println!(
            "crossover: dba never faster up to {} misses",
            crossover.max_scanned
        ),
    }
    println!("outputs: {}", out.display());
    Ok(Outcome::Success)
}
