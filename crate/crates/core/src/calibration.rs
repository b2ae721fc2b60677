//! Fits the parametric cost shape to published iteration latencies.
//!
//! Each reference row becomes a scenario (batch, ratio, context, MTP) and a
//! target latency `accept_ratio / otps`. Miss profiles come from synthetic
//! traces replayed once per (context, accept, ratio) and are reused across
//! fit iterations. Rows whose MTP was not fitted get their verify-token width
//! solved on the block's ratio-1.0 row before prediction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cache::{replay, CacheError, MissProfile};
use crate::costmodel::{fit_profile, CostTable, FitError, FitOptions, ParamGroup, ParametricForm};
use crate::pipeline::{mean_iteration_latency, warm_start_for};
use crate::reference::ReferenceRow;
use crate::scenario::Scenario;
use crate::trace::{generate_trace, TraceError, TraceGenParams};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("no ratio-1.0 row for mtp {mtp} at context {context} to anchor its width")]
    NoAnchor { mtp: u32, context: u64 },
    #[error("width for mtp {0} not bracketed by [1, {1}]")]
    WidthUnbracketed(u32, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationConfig {
    pub base: Scenario,
    /// Shape and locality of the synthetic traces; context, top-k, layers
    /// and accept mean are set per row.
    pub trace: TraceGenParams,
    pub groups: Vec<ParamGroup>,
    /// Least-squares weight of ratio-1.0 rows relative to the others.
    pub anchor_weight: f64,
    /// Contexts at which Two-Batch Overlap is off.
    pub tbo_off_contexts: Vec<u64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            base: Scenario::default(),
            trace: TraceGenParams::default(),
            groups: vec![ParamGroup::Fixed, ParamGroup::Slope],
            anchor_weight: 1.0,
            tbo_off_contexts: vec![131_072],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowRole {
    Fit,
    WidthAnchor,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowPrediction {
    pub row: ReferenceRow,
    pub role: RowRole,
    pub width: f64,
    pub mean_misses_per_request: f64,
    pub target_iter_us: f64,
    pub predicted_iter_us: f64,
    pub predicted_otps: f64,
    /// `predicted / published - 1` for OTPS.
    pub otps_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub groups: Vec<ParamGroup>,
    pub multipliers: Vec<f64>,
    pub form: ParametricForm,
    /// Verify-token width per MTP setting.
    pub widths: BTreeMap<u32, f64>,
    pub rows: Vec<RowPrediction>,
    pub fit_iterations: usize,
}

impl CalibrationReport {
    pub fn profile(&self) -> CostTable {
        self.form.realize_default_grid()
    }

    pub fn max_abs_otps_error(&self, role: RowRole) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.role == role)
            .map(|r| r.otps_error.abs())
            .fold(0.0, f64::max)
    }
}

/// Miss profiles keyed by (context, accept, ratio).
struct MissBank {
    profiles: BTreeMap<(u64, u64, u64), (MissProfile, Vec<u16>)>,
}

impl MissBank {
    fn build(cfg: &CalibrationConfig, rows: &[ReferenceRow]) -> Result<Self, CalibrationError> {
        let mut traces: BTreeMap<(u64, u64), TraceGenParams> = BTreeMap::new();
        for r in rows {
            traces
                .entry((r.context, r.accept_ratio.to_bits()))
                .or_insert_with(|| TraceGenParams {
                    num_layers: cfg.base.model.num_layers,
                    context_len: r.context,
                    topk: cfg.base.model.effective_topk(r.context),
                    mean_accept: r.accept_ratio,
                    ..cfg.trace.clone()
                });
        }
        let generated = traces
            .into_par_iter()
            .map(|(k, p)| generate_trace(&p).map(|t| (k, t)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut jobs = Vec::new();
        for r in rows {
            let key = (
                r.context,
                r.accept_ratio.to_bits(),
                r.sparse_ratio.to_bits(),
            );
            if !jobs.contains(&key) {
                jobs.push(key);
            }
        }
        let profiles = jobs
            .par_iter()
            .map(|&(ctx, acc, ratio_bits)| {
                let (_, trace) = generated
                    .iter()
                    .find(|(k, _)| *k == (ctx, acc))
                    .expect("trace generated for every block");
                let ratio = f64::from_bits(ratio_bits);
                let profile = replay(trace, ratio, warm_start_for(ratio, trace))?;
                let accepted = trace.steps.iter().map(|s| s.tokens_accepted).collect();
                Ok(((ctx, acc, ratio_bits), (profile, accepted)))
            })
            .collect::<Result<BTreeMap<_, _>, CacheError>>()?;
        Ok(Self { profiles })
    }

    fn get(&self, r: &ReferenceRow) -> &(MissProfile, Vec<u16>) {
        &self.profiles[&(
            r.context,
            r.accept_ratio.to_bits(),
            r.sparse_ratio.to_bits(),
        )]
    }
}

fn row_scenario(cfg: &CalibrationConfig, r: &ReferenceRow, width: Option<f64>) -> Scenario {
    let mut s = cfg.base.clone();
    s.model.mtp_width = r.mtp;
    s.model.accept_ratio = r.accept_ratio;
    s.model.token_width = width;
    s.deployment.batch_size = r.batch;
    s.deployment.sparse_ratio = r.sparse_ratio;
    s.deployment.context_len = r.context;
    s.deployment.tbo_enabled = !cfg.tbo_off_contexts.contains(&r.context);
    s
}

fn predict(
    cfg: &CalibrationConfig,
    bank: &MissBank,
    form: &ParametricForm,
    r: &ReferenceRow,
    width: Option<f64>,
) -> f64 {
    let (profile, accepted) = bank.get(r);
    mean_iteration_latency(&row_scenario(cfg, r, width), form, profile, accepted)
}

/// Fits `fit_rows`, then predicts `heldout_rows` with widths anchored per MTP.
pub fn calibrate(
    cfg: &CalibrationConfig,
    fit_rows: &[ReferenceRow],
    heldout_rows: &[ReferenceRow],
) -> Result<CalibrationReport, CalibrationError> {
    let all: Vec<ReferenceRow> = fit_rows.iter().chain(heldout_rows).copied().collect();
    let bank = MissBank::build(cfg, &all)?;
    let base = ParametricForm::synthetic_default();

    let targets: Vec<f64> = fit_rows.iter().map(ReferenceRow::iteration_us).collect();
    let weights: Vec<f64> = fit_rows
        .iter()
        .map(|r| {
            if r.sparse_ratio >= 1.0 {
                cfg.anchor_weight
            } else {
                1.0
            }
        })
        .collect();
    let fit = fit_profile(
        &base,
        &cfg.groups,
        &targets,
        &weights,
        |form, i| predict(cfg, &bank, form, &fit_rows[i], None),
        FitOptions::default(),
    )?;

    let mut widths: BTreeMap<u32, f64> = BTreeMap::new();
    for r in fit_rows {
        widths.insert(r.mtp, row_scenario(cfg, r, None).model.width());
    }
    let mut anchors: Vec<(u32, u64)> = Vec::new();
    for r in heldout_rows {
        if widths.contains_key(&r.mtp) {
            continue;
        }
        let anchor_rows: Vec<&ReferenceRow> = heldout_rows
            .iter()
            .filter(|x| x.mtp == r.mtp && x.context == r.context && x.sparse_ratio >= 1.0)
            .collect();
        if anchor_rows.is_empty() {
            return Err(CalibrationError::NoAnchor {
                mtp: r.mtp,
                context: r.context,
            });
        }
        let w = solve_width(cfg, &bank, &fit.form, &anchor_rows)?;
        widths.insert(r.mtp, w);
        anchors.push((r.mtp, r.context));
    }

    let describe = |r: &ReferenceRow, role: RowRole| {
        let width = widths[&r.mtp];
        let (profile, _) = bank.get(r);
        let predicted = predict(cfg, &bank, &fit.form, r, Some(width));
        let otps = r.accept_ratio / (predicted * 1e-6);
        RowPrediction {
            row: *r,
            role,
            width,
            mean_misses_per_request: profile.aggregate_mean() / f64::from(profile.requests),
            target_iter_us: r.iteration_us(),
            predicted_iter_us: predicted,
            predicted_otps: otps,
            otps_error: otps / r.otps - 1.0,
        }
    };
    let mut rows: Vec<RowPrediction> = fit_rows.iter().map(|r| describe(r, RowRole::Fit)).collect();
    rows.extend(heldout_rows.iter().map(|r| {
        let anchored = r.sparse_ratio >= 1.0 && anchors.contains(&(r.mtp, r.context));
        describe(
            r,
            if anchored {
                RowRole::WidthAnchor
            } else {
                RowRole::Heldout
            },
        )
    }));

    Ok(CalibrationReport {
        groups: fit.groups,
        multipliers: fit.multipliers,
        form: fit.form,
        widths,
        rows,
        fit_iterations: fit.iterations,
    })
}

/// Width at which the anchor rows' mean predicted latency meets their mean
/// target. Latency grows with width, so bisection suffices.
fn solve_width(
    cfg: &CalibrationConfig,
    bank: &MissBank,
    form: &ParametricForm,
    anchors: &[&ReferenceRow],
) -> Result<f64, CalibrationError> {
    let target = anchors.iter().map(|r| r.iteration_us()).sum::<f64>() / anchors.len() as f64;
    let gap = |w: f64| {
        anchors
            .iter()
            .map(|r| predict(cfg, bank, form, r, Some(w)))
            .sum::<f64>()
            / anchors.len() as f64
            - target
    };
    let mtp = anchors[0].mtp;
    let (mut lo, mut hi) = (1.0, 8.0 * (f64::from(mtp) + 1.0));
    if gap(lo) > 0.0 || gap(hi) < 0.0 {
        return Err(CalibrationError::WidthUnbracketed(mtp, hi));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
