//! Deployment scenarios and the GPU memory planner.
//!
//! A [`Scenario`] bundles the model dimensions, the hardware envelope and the
//! deployment knobs (context, batch, Sparse Memory Ratio, overlap policy). The
//! planner answers the two questions that drive offloading: how many requests
//! fit in the cache budget at a given ratio, and which ratio a batch needs.
//!
//! Cache bytes per token per layer are split between the Indexer-Cache, which
//! always stays on the GPU, and the Latent-Cache, of which only a fraction
//! `sparse_ratio` is resident.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{TransferMode, TransferModel};

/// Planning context used by the shipped calibration profile.
pub const REFERENCE_CONTEXT: u64 = 32_768;
/// Batch size that exactly fills the budget at ratio 1.0 and [`REFERENCE_CONTEXT`].
pub const REFERENCE_FULL_BATCH: u32 = 52;
/// Published small-copy effective bandwidths, used to derive per-call overheads.
pub const PER_CALL_EFFECTIVE_H2D_GBS: f64 = 0.79;
pub const PER_CALL_EFFECTIVE_D2H_GBS: f64 = 0.23;

/// Relative slack when dividing a budget by a per-request footprint, so that
/// a budget of exactly `n` footprints yields `n` despite rounding.
const FIT_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("sparse ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("invalid overlap policy `{0}` (expected none, da, dba or layerwise:<threshold>)")]
    InvalidPolicy(String),
    #[error("failed to read scenario file: {0}")]
    Io(String),
    #[error("failed to parse scenario: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub num_layers: u32,
    /// Entries selected per step per layer.
    pub topk: u32,
    /// Bytes of one Latent-Cache entry in one layer.
    pub latent_block_bytes: u32,
    /// Share of total cache bytes held by the Indexer-Cache.
    pub indexer_fraction: f64,
    /// Overrides the Indexer-Cache bytes per token per layer derived from
    /// `indexer_fraction`.
    pub indexer_bytes: Option<f64>,
    /// Speculative (MTP) tokens per iteration.
    pub mtp_width: u32,
    /// Expected accepted tokens per iteration.
    pub accept_ratio: f64,
    /// Effective token width of one verify pass; defaults to `mtp_width + 1`.
    pub token_width: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            num_layers: 61,
            topk: 2048,
            latent_block_bytes: 656,
            indexer_fraction: 0.168,
            indexer_bytes: None,
            mtp_width: 2,
            accept_ratio: 1.7,
            token_width: None,
        }
    }
}

impl ModelSpec {
    /// Indexer-Cache bytes per token per layer.
    pub fn indexer_block_bytes(&self) -> f64 {
        self.indexer_bytes.unwrap_or_else(|| {
            f64::from(self.latent_block_bytes) * self.indexer_fraction
                / (1.0 - self.indexer_fraction)
        })
    }

    /// Tokens processed per request by one forward pass.
    pub fn width(&self) -> f64 {
        self.token_width
            .unwrap_or_else(|| f64::from(self.mtp_width) + 1.0)
    }

    /// Top-K actually selected when the history is shorter than `topk`.
    pub fn effective_topk(&self, context_len: u64) -> u32 {
        u32::try_from(context_len.min(u64::from(self.topk))).unwrap_or(self.topk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareSpec {
    /// Bytes usable for cache after weights and activations.
    pub gpu_mem_bytes: u64,
    pub bw_h2d_gbs: f64,
    pub bw_d2h_gbs: f64,
    /// Whether H2D and D2H proceed concurrently.
    pub pcie_duplex: bool,
    /// Replicas whose throughput aggregates into the reported tokens/s.
    pub replication: u32,
    pub transfer_mode: TransferMode,
    /// Per-copy overheads for `per_call` mode; derived from the published
    /// small-block effective bandwidths when absent.
    pub per_call_overhead_h2d_us: Option<f64>,
    pub per_call_overhead_d2h_us: Option<f64>,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        Self {
            gpu_mem_bytes: calibrated_budget(
                &ModelSpec::default(),
                REFERENCE_CONTEXT,
                REFERENCE_FULL_BATCH,
            ),
            bw_h2d_gbs: 37.0,
            bw_d2h_gbs: 43.0,
            pcie_duplex: true,
            replication: 8,
            transfer_mode: TransferMode::Batched,
            per_call_overhead_h2d_us: None,
            per_call_overhead_d2h_us: None,
        }
    }
}

impl HardwareSpec {
    pub fn transfer_model(&self, model: &ModelSpec) -> TransferModel {
        let block = f64::from(model.latent_block_bytes);
        let h2d = self.per_call_overhead_h2d_us.unwrap_or_else(|| {
            TransferModel::overhead_for_effective(
                block,
                self.bw_h2d_gbs,
                PER_CALL_EFFECTIVE_H2D_GBS,
            )
        });
        let d2h = self.per_call_overhead_d2h_us.unwrap_or_else(|| {
            TransferModel::overhead_for_effective(
                block,
                self.bw_d2h_gbs,
                PER_CALL_EFFECTIVE_D2H_GBS,
            )
        });
        TransferModel {
            mode: self.transfer_mode,
            bw_h2d_gbs: self.bw_h2d_gbs,
            bw_d2h_gbs: self.bw_d2h_gbs,
            per_call_overhead_h2d_us: h2d,
            per_call_overhead_d2h_us: d2h,
            block_bytes: block,
        }
    }
}

/// How compute and PCIe transfers are overlapped inside the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OverlapPolicy {
    None,
    Da,
    Dba,
    /// Per-layer choice: DBA where the mean miss count reaches the threshold.
    Layerwise(f64),
}

impl fmt::Display for OverlapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Da => f.write_str("da"),
            Self::Dba => f.write_str("dba"),
            Self::Layerwise(t) => write!(f, "layerwise:{t}"),
        }
    }
}

impl FromStr for OverlapPolicy {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "none" => Ok(Self::None),
            "da" => Ok(Self::Da),
            "dba" => Ok(Self::Dba),
            other => {
                let threshold = other
                    .strip_prefix("layerwise:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .filter(|t| !t.is_nan() && *t >= 0.0)
                    .ok_or_else(|| ScenarioError::InvalidPolicy(s.to_string()))?;
                Ok(Self::Layerwise(threshold))
            }
        }
    }
}

impl TryFrom<String> for OverlapPolicy {
    type Error = ScenarioError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<OverlapPolicy> for String {
    fn from(p: OverlapPolicy) -> Self {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentSpec {
    /// Resident history per request at decode start, in tokens.
    pub context_len: u64,
    pub batch_size: u32,
    /// Fraction of each request's Latent-Cache entries resident on the GPU.
    pub sparse_ratio: f64,
    /// Two-Batch Overlap.
    pub tbo_enabled: bool,
    pub overlap_policy: OverlapPolicy,
    /// Share of the batch in the first DBA half.
    pub dba_split: f64,
    /// Indexer cost inflation when the batch is split for DBA.
    pub indexer_split_eta: f64,
    /// Micro-batch overhead of Two-Batch Overlap, as a fraction of compute.
    pub tbo_overhead: f64,
}

impl Default for DeploymentSpec {
    fn default() -> Self {
        Self {
            context_len: REFERENCE_CONTEXT,
            batch_size: REFERENCE_FULL_BATCH,
            sparse_ratio: 1.0,
            tbo_enabled: true,
            overlap_policy: OverlapPolicy::Layerwise(256.0),
            dba_split: 0.5,
            indexer_split_eta: 1.15,
            tbo_overhead: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub deployment: DeploymentSpec,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn per_request_cache_bytes(&self) -> Result<f64, ScenarioError> {
        per_request_cache_bytes(
            &self.model,
            self.deployment.context_len,
            self.deployment.sparse_ratio,
        )
    }

    pub fn max_batch_size(&self) -> Result<u32, ScenarioError> {
        max_batch_size(
            &self.model,
            &self.hardware,
            self.deployment.context_len,
            self.deployment.sparse_ratio,
        )
    }

    pub fn transfer_model(&self) -> TransferModel {
        self.hardware.transfer_model(&self.model)
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_scenario(self)
    }
}

/// GPU-resident cache bytes for one request: the full Indexer-Cache plus the
/// resident fraction of the Latent-Cache, over every layer.
pub fn per_request_cache_bytes(
    model: &ModelSpec,
    context_len: u64,
    sparse_ratio: f64,
) -> Result<f64, ScenarioError> {
    check_ratio(sparse_ratio)?;
    let per_token_layer =
        model.indexer_block_bytes() + sparse_ratio * f64::from(model.latent_block_bytes);
    Ok(context_len as f64 * f64::from(model.num_layers) * per_token_layer)
}

/// Largest batch whose resident cache fits the budget. Zero means not even
/// one request fits.
pub fn max_batch_size(
    model: &ModelSpec,
    hw: &HardwareSpec,
    context_len: u64,
    sparse_ratio: f64,
) -> Result<u32, ScenarioError> {
    let per_request = per_request_cache_bytes(model, context_len, sparse_ratio)?;
    if per_request <= 0.0 {
        return Ok(u32::MAX);
    }
    let fit = (hw.gpu_mem_bytes as f64 / per_request) * (1.0 + FIT_EPSILON);
    Ok(fit.floor().min(f64::from(u32::MAX)) as u32)
}

/// Largest ratio on a grid of `grid_step` at which `batch_size` requests still
/// fit, or `None` when even the indexer-only footprint is too large.
pub fn ratio_for_batch(
    model: &ModelSpec,
    hw: &HardwareSpec,
    context_len: u64,
    batch_size: u32,
    grid_step: f64,
) -> Result<Option<f64>, ScenarioError> {
    if batch_size == 0 {
        return Err(ScenarioError::ZeroBatch);
    }
    let steps = (1.0 / grid_step).round() as u32;
    for k in (1..=steps).rev() {
        let ratio = f64::from(k) / f64::from(steps);
        if max_batch_size(model, hw, context_len, ratio)? >= batch_size {
            return Ok(Some(ratio));
        }
    }
    Ok(None)
}

/// Budget in bytes that holds exactly `batch` full-ratio requests.
pub fn calibrated_budget(model: &ModelSpec, context_len: u64, batch: u32) -> u64 {
    let per_request = per_request_cache_bytes(model, context_len, 1.0).expect("ratio 1.0 is valid");
    (per_request * f64::from(batch)).ceil() as u64
}

fn check_ratio(ratio: f64) -> Result<(), ScenarioError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(ScenarioError::InvalidRatio(ratio))
    }
}

/// One broken constraint, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub constraint: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

/// Every broken constraint, memory feasibility included.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = config_violations(s);
    out.extend(memory_violation(s));
    out
}

/// The batch exceeding what fits in the cache budget, if it does.
pub fn memory_violation(s: &Scenario) -> Option<Violation> {
    let d = &s.deployment;
    let max = max_batch_size(&s.model, &s.hardware, d.context_len, d.sparse_ratio).ok()?;
    (d.batch_size > max).then(|| Violation {
        field: "deployment.batch_size",
        constraint: format!(
            "memory feasibility: {} requests exceed the budget of {} at ratio {}",
            d.batch_size, max, d.sparse_ratio
        ),
    })
}

/// Broken constraints on individual fields, memory feasibility excluded.
pub fn config_violations(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut check = |ok: bool, field: &'static str, constraint: &str| {
        if !ok {
            out.push(Violation {
                field,
                constraint: constraint.to_string(),
            });
        }
    };
    let m = &s.model;
    let hw = &s.hardware;
    let d = &s.deployment;

    check(m.num_layers >= 1, "model.num_layers", "must be >= 1");
    check(m.topk >= 1, "model.topk", "must be >= 1");
    check(
        m.latent_block_bytes >= 1,
        "model.latent_block_bytes",
        "must be >= 1",
    );
    check(
        m.indexer_fraction > 0.0 && m.indexer_fraction < 1.0,
        "model.indexer_fraction",
        "must lie in (0, 1)",
    );
    if let Some(b) = m.indexer_bytes {
        check(b >= 0.0, "model.indexer_bytes", "must be >= 0");
    }
    check(m.accept_ratio >= 1.0, "model.accept_ratio", "must be >= 1");
    check(
        m.accept_ratio <= f64::from(m.mtp_width) + 1.0,
        "model.accept_ratio",
        "must be <= mtp_width + 1",
    );
    if let Some(w) = m.token_width {
        check(w >= 1.0, "model.token_width", "must be >= 1");
    }

    check(hw.bw_h2d_gbs > 0.0, "hardware.bw_h2d_gbs", "must be > 0");
    check(hw.bw_d2h_gbs > 0.0, "hardware.bw_d2h_gbs", "must be > 0");
    check(hw.replication >= 1, "hardware.replication", "must be >= 1");
    for (v, field) in [
        (
            hw.per_call_overhead_h2d_us,
            "hardware.per_call_overhead_h2d_us",
        ),
        (
            hw.per_call_overhead_d2h_us,
            "hardware.per_call_overhead_d2h_us",
        ),
    ] {
        if let Some(v) = v {
            check(v >= 0.0, field, "must be >= 0");
        }
    }

    let ratio_ok = d.sparse_ratio > 0.0 && d.sparse_ratio <= 1.0;
    check(ratio_ok, "deployment.sparse_ratio", "must lie in (0, 1]");
    check(d.batch_size >= 1, "deployment.batch_size", "must be >= 1");
    check(d.context_len >= 1, "deployment.context_len", "must be >= 1");
    check(
        d.dba_split > 0.0 && d.dba_split < 1.0,
        "deployment.dba_split",
        "must lie in (0, 1)",
    );
    check(
        d.indexer_split_eta >= 1.0,
        "deployment.indexer_split_eta",
        "must be >= 1",
    );
    check(
        d.tbo_overhead >= 0.0,
        "deployment.tbo_overhead",
        "must be >= 0",
    );

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer() -> ModelSpec {
        ModelSpec {
            num_layers: 1,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn full_ratio_footprint_matches_hand_arithmetic() {
        let bytes = per_request_cache_bytes(&one_layer(), 32_768, 1.0).unwrap();
        let idx: f64 = 656.0 * 0.168 / 0.832;
        assert!((idx - 132.46).abs() < 0.01);
        assert!((bytes - 32_768.0 * (idx + 656.0)).abs() < 1e-6);
        assert!((bytes / 1e6 - 25.84).abs() < 0.01);
    }

    #[test]
    fn footprint_ratio_follows_indexer_split() {
        let m = one_layer();
        let low = per_request_cache_bytes(&m, 32_768, 0.21).unwrap();
        let full = per_request_cache_bytes(&m, 32_768, 1.0).unwrap();
        assert!((low / full - (0.168 + 0.832 * 0.21)).abs() < 1e-12);
        assert!((low / full - 0.3427).abs() < 1e-4);
    }

    #[test]
    fn footprint_approaches_indexer_only_as_ratio_vanishes() {
        let m = one_layer();
        let tiny = per_request_cache_bytes(&m, 32_768, 1e-12).unwrap();
        assert!((tiny - 32_768.0 * m.indexer_block_bytes()).abs() < 1e-3);
    }

    #[test]
    fn rejects_ratio_outside_unit_interval() {
        let m = one_layer();
        assert_eq!(
            per_request_cache_bytes(&m, 10, 0.0),
            Err(ScenarioError::InvalidRatio(0.0))
        );
        assert!(per_request_cache_bytes(&m, 10, 1.5).is_err());
        assert!(per_request_cache_bytes(&m, 10, -0.1).is_err());
    }

    #[test]
    fn calibrated_budget_reproduces_reference_points() {
        let m = ModelSpec::default();
        let hw = HardwareSpec::default();
        assert_eq!(max_batch_size(&m, &hw, 32_768, 1.0).unwrap(), 52);
        // 52 / (0.168 + 0.832 * 0.21) = 151.7
        assert_eq!(max_batch_size(&m, &hw, 32_768, 0.21).unwrap(), 151);
        assert_eq!(max_batch_size(&m, &hw, 131_072, 1.0).unwrap(), 13);
        // 13 / 0.2512 = 51.75
        assert_eq!(max_batch_size(&m, &hw, 131_072, 0.1).unwrap(), 51);
        let rel = |p: u32, published: u32| (f64::from(p) - f64::from(published)).abs() / f64::from(published);
        assert!(rel(151, 160) < 0.06);
        assert!(rel(51, 54) < 0.06);
    }

    #[test]
    fn budget_of_exactly_one_request_fits_one() {
        let m = ModelSpec::default();
        let hw = HardwareSpec {
            gpu_mem_bytes: calibrated_budget(&m, 4096, 1),
            ..HardwareSpec::default()
        };
        assert_eq!(max_batch_size(&m, &hw, 4096, 1.0).unwrap(), 1);
        let tight = HardwareSpec {
            gpu_mem_bytes: calibrated_budget(&m, 4096, 1) - 100,
            ..hw
        };
        assert_eq!(max_batch_size(&m, &tight, 4096, 1.0).unwrap(), 0);
    }

    #[test]
    fn ratio_for_batch_inverts_the_planner() {
        let m = ModelSpec::default();
        let hw = HardwareSpec::default();
        assert_eq!(
            ratio_for_batch(&m, &hw, 32_768, 52, 0.01).unwrap(),
            Some(1.0)
        );
        // (52/160 - 0.168) / 0.832 = 0.1887, so 0.18 is the largest grid ratio.
        let r = ratio_for_batch(&m, &hw, 32_768, 160, 0.01)
            .unwrap()
            .unwrap();
        assert!((r - 0.18).abs() < 1e-12);
        assert!(max_batch_size(&m, &hw, 32_768, r).unwrap() >= 160);
        assert!(max_batch_size(&m, &hw, 32_768, r + 0.01).unwrap() < 160);
        // 52 / 0.168 = 309.5 requests is the indexer-only limit.
        assert_eq!(ratio_for_batch(&m, &hw, 32_768, 400, 0.01).unwrap(), None);
        assert_eq!(
            ratio_for_batch(&m, &hw, 32_768, 0, 0.01),
            Err(ScenarioError::ZeroBatch)
        );
    }

    #[test]
    fn default_scenario_is_valid() {
        assert!(Scenario::default().validate().is_empty());
    }

    #[test]
    fn out_of_range_ratio_is_one_named_violation() {
        let mut s = Scenario::default();
        s.deployment.sparse_ratio = 1.5;
        let v = s.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "deployment.sparse_ratio");
    }

    #[test]
    fn oversized_batch_is_a_memory_violation() {
        let mut s = Scenario::default();
        s.deployment.batch_size = 53;
        let v = s.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].constraint.contains("memory feasibility"));
    }

    #[test]
    fn accept_ratio_bounded_by_mtp() {
        let mut s = Scenario::default();
        s.model.accept_ratio = 3.5;
        let v = s.validate();
        assert!(v.iter().any(|v| v.field == "model.accept_ratio"));
    }

    #[test]
    fn effective_topk_clamps_to_context() {
        let m = ModelSpec::default();
        assert_eq!(m.effective_topk(100), 100);
        assert_eq!(m.effective_topk(1 << 20), 2048);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("DA".parse::<OverlapPolicy>().unwrap(), OverlapPolicy::Da);
        assert_eq!(
            "layerwise:512".parse::<OverlapPolicy>().unwrap(),
            OverlapPolicy::Layerwise(512.0)
        );
        assert!("layerwise:-1".parse::<OverlapPolicy>().is_err());
        assert!("fast".parse::<OverlapPolicy>().is_err());
    }

    #[test]
    fn scenario_file_round_trips_and_rejects_unknown_keys() {
        let s = Scenario::default();
        let text = s.to_toml_string();
        assert_eq!(Scenario::from_toml_str(&text).unwrap(), s);

        let partial =
            "[deployment]\nbatch_size = 64\nsparse_ratio = 0.82\noverlap_policy = \"dba\"\n";
        let p = Scenario::from_toml_str(partial).unwrap();
        assert_eq!(p.deployment.batch_size, 64);
        assert_eq!(p.deployment.overlap_policy, OverlapPolicy::Dba);
        assert_eq!(p.model, ModelSpec::default());

        assert!(Scenario::from_toml_str("[deployment]\nbatchsize = 3\n").is_err());
        assert!(Scenario::from_toml_str("[gpu]\nx = 1\n").is_err());
    }
}
