//! Parametric cost shapes and least-squares calibration.
//!
//! Every op is priced as `fixed + per_unit * b + per_unit_ctx * b * c`, where
//! `b` is the op's batch argument and `c` the history length. Sparse attention
//! reads at most `attn_context_knee` entries, so its per-unit term stops
//! growing past that context.
//!
//! Calibration scales groups of coefficients by free multipliers and solves
//! for them with Gauss-Newton on whatever iteration-latency predictor the
//! caller supplies.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::table::{CostSource, CostTable, Op};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpForm {
    pub fixed_us: f64,
    pub per_unit_us: f64,
    pub per_unit_ctx_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricForm {
    pub ops: BTreeMap<Op, OpForm>,
    pub attn_context_knee: f64,
}

impl ParametricForm {
    /// Hand-set shape used when no measured profile is given.
    pub fn synthetic_default() -> Self {
        let f = |fixed_us, per_unit_us, per_unit_ctx_us| OpForm {
            fixed_us,
            per_unit_us,
            per_unit_ctx_us,
        };
        let ops = BTreeMap::from([
            (Op::IndexerLogits, f(8.0, 0.0, 4e-5)),
            (Op::IndexerTopk, f(6.0, 0.0, 1e-5)),
            (Op::PreAttn, f(12.0, 0.35, 0.0)),
            (Op::SparseMla, f(15.0, 1.1, 0.0)),
            (Op::MergeAttn, f(4.0, 0.02, 0.0)),
            (Op::DenseMlp, f(180.0, 0.9, 0.0)),
            (Op::MoeDispatch, f(40.0, 0.45, 0.0)),
            (Op::MoeCombine, f(40.0, 0.45, 0.0)),
        ]);
        Self {
            ops,
            attn_context_knee: 2048.0,
        }
    }

    /// Applies group multipliers.
    pub fn scaled(&self, groups: &[ParamGroup], multipliers: &[f64]) -> Self {
        let get = |g: ParamGroup| groups.iter().position(|&x| x == g).map(|i| multipliers[i]);
        let fixed = get(ParamGroup::Fixed).unwrap_or(1.0);
        let slope = get(ParamGroup::Slope).unwrap_or(1.0);
        let ctx = get(ParamGroup::ContextSlope).unwrap_or(slope);
        let ops = self
            .ops
            .iter()
            .map(|(&op, f)| {
                (
                    op,
                    OpForm {
                        fixed_us: f.fixed_us * fixed,
                        per_unit_us: f.per_unit_us * slope,
                        per_unit_ctx_us: f.per_unit_ctx_us * ctx,
                    },
                )
            })
            .collect();
        Self {
            ops,
            attn_context_knee: self.attn_context_knee,
        }
    }

    /// Samples the form on a grid. Context-free ops are stored at one context.
    /// Because every shape is bilinear in `(b, c)` between knots, and the
    /// attention knee is itself a knot, lookups reproduce the form exactly
    /// inside the grid.
    pub fn realize(&self, batches: &[f64], contexts: &[f64]) -> CostTable {
        let mut ctx_grid: Vec<f64> = contexts.to_vec();
        if !ctx_grid.contains(&self.attn_context_knee) {
            ctx_grid.push(self.attn_context_knee);
        }
        ctx_grid.sort_by(f64::total_cmp);
        let mut points = Vec::new();
        for op in Op::ALL {
            let ctxs: &[f64] = if op.context_free() {
                &ctx_grid[ctx_grid.len() - 1..]
            } else {
                &ctx_grid
            };
            for &c in ctxs {
                for &b in batches {
                    points.push((op, b, c, self.op_time(op, b, c).max(f64::MIN_POSITIVE)));
                }
            }
        }
        CostTable::from_points(&points).expect("every op is sampled")
    }

    pub fn realize_default_grid(&self) -> CostTable {
        self.realize(&DEFAULT_BATCH_GRID, &DEFAULT_CONTEXT_GRID)
    }
}

pub const DEFAULT_BATCH_GRID: [f64; 12] = [
    1.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0,
];
pub const DEFAULT_CONTEXT_GRID: [f64; 9] = [
    1024.0, 2048.0, 4096.0, 8192.0, 16384.0, 32768.0, 65536.0, 131072.0, 262144.0,
];

impl CostSource for ParametricForm {
    fn op_time(&self, op: Op, batch: f64, context: f64) -> f64 {
        let f = self.ops.get(&op).copied().unwrap_or_default();
        let unit = if op == Op::SparseMla {
            f.per_unit_us * context.min(self.attn_context_knee) / self.attn_context_knee
        } else {
            f.per_unit_us
        };
        let ctx = if op.context_free() {
            0.0
        } else {
            f.per_unit_ctx_us * context
        };
        f.fixed_us + unit * batch + ctx * batch
    }
}

/// A set of coefficients scaled by one free multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Every `fixed_us`.
    Fixed,
    /// Every `per_unit_us`, and `per_unit_ctx_us` unless that has its own group.
    Slope,
    /// Every `per_unit_ctx_us`.
    ContextSlope,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("underdetermined: {rows} independent rows for {params} free parameters")]
    Underdetermined { rows: usize, params: usize },
    #[error("no free parameters")]
    NoParameters,
    #[error("fit diverged: {0}")]
    Diverged(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileFit {
    pub groups: Vec<ParamGroup>,
    pub multipliers: Vec<f64>,
    pub form: ParametricForm,
    pub predictions: Vec<f64>,
    /// `prediction / target - 1` per row.
    pub relative_residuals: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-13,
        }
    }
}

/// Fits group multipliers so that `predict(form, row)` matches
/// `targets[row]` in relative least squares, weighted per row.
///
/// The predictor is treated as a black box; its Jacobian is estimated by
/// central differences.
pub fn fit_profile<P>(
    base: &ParametricForm,
    groups: &[ParamGroup],
    targets: &[f64],
    weights: &[f64],
    predict: P,
    options: FitOptions,
) -> Result<ProfileFit, FitError>
where
    P: Fn(&ParametricForm, usize) -> f64,
{
    let p = groups.len();
    let n = targets.len();
    if p == 0 {
        return Err(FitError::NoParameters);
    }
    if n < p {
        return Err(FitError::Underdetermined { rows: n, params: p });
    }
    let w: Vec<f64> = (0..n)
        .map(|i| weights.get(i).copied().unwrap_or(1.0).sqrt())
        .collect();
    let residuals = |theta: &[f64]| -> DVector<f64> {
        let form = base.scaled(groups, theta);
        DVector::from_iterator(
            n,
            (0..n).map(|i| w[i] * (predict(&form, i) / targets[i] - 1.0)),
        )
    };

    let mut theta = vec![1.0; p];
    let mut r = residuals(&theta);
    let mut iterations = 0;
    for it in 0..options.max_iterations {
        iterations = it + 1;
        let mut jac = DMatrix::zeros(n, p);
        for j in 0..p {
            let h = 1e-6 * theta[j].abs().max(1e-3);
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let col = (residuals(&up) - residuals(&dn)) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let svd = jac.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > smax * 1e-10)
            .count();
        if rank < p {
            return Err(FitError::Underdetermined {
                rows: rank,
                params: p,
            });
        }
        let step = svd
            .solve(&(-&r), 1e-14)
            .map_err(|e| FitError::Diverged(e.to_string()))?;

        // Backtrack until the squared residual does not grow.
        let base_cost = r.norm_squared();
        let mut scale = 1.0;
        let (next, next_r) = loop {
            let cand: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(t, s)| (t + scale * s).max(1e-9))
                .collect();
            let cr = residuals(&cand);
            if cr.norm_squared() <= base_cost || scale < 1e-6 {
                break (cand, cr);
            }
            scale *= 0.5;
        };
        let moved = next
            .iter()
            .zip(&theta)
            .map(|(a, b)| ((a - b) / b).abs())
            .fold(0.0, f64::max);
        theta = next;
        r = next_r;
        if moved < options.tolerance || r.norm() < options.tolerance {
            break;
        }
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(FitError::Diverged("non-finite multiplier".into()));
    }

    let form = base.scaled(groups, &theta);
    let predictions: Vec<f64> = (0..n).map(|i| predict(&form, i)).collect();
    let relative_residuals = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| p / t - 1.0)
        .collect();
    Ok(ProfileFit {
        groups: groups.to_vec(),
        multipliers: theta,
        form,
        predictions,
        relative_residuals,
        iterations,
    })
}
