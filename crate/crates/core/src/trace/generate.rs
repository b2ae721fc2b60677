//! Synthetic trace generator.
//!
//! Each layer runs a retention-resampling process: every member of the
//! previous top-K set survives independently with probability `r`, and the
//! set is refilled to K with positions drawn without replacement from outside
//! the previous set, weighted by a power law over recency (the newest
//! position has age 0 and weight 1, age `a` has weight `(a + 1)^-bias`).
//! Refills never collide with the previous set unless the history is too
//! short to avoid it, so the expected intra-layer similarity equals `r`.
//!
//! The process starts [`PREFILL_WINDOWS`] windows before decode, over the
//! tail of the prompt; those windows are the warm-up input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AccessTrace, StepAccess, TraceError};

pub const PREFILL_WINDOWS: usize = 32;

/// Rejections tolerated before falling back to uniform draws.
const WEIGHTED_TRIES: usize = 64;
const UNIFORM_TRIES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceGenParams {
    pub target_similarity: f64,
    pub recency_bias: f64,
    pub num_layers: u32,
    pub context_len: u64,
    pub topk: u32,
    pub num_steps: usize,
    /// Expected tokens appended per step.
    pub mean_accept: f64,
    pub layer_similarity_overrides: BTreeMap<u32, f64>,
    /// Whether the prefill windows are stored in the trace.
    pub prefill_windows: bool,
    pub seed: u64,
}

impl Default for TraceGenParams {
    fn default() -> Self {
        Self {
            target_similarity: 0.9,
            recency_bias: 1.0,
            num_layers: 61,
            context_len: 32_768,
            topk: 2048,
            num_steps: 32,
            mean_accept: 1.7,
            layer_similarity_overrides: BTreeMap::new(),
            prefill_windows: true,
            seed: 0,
        }
    }
}

impl TraceGenParams {
    pub fn layer_similarity(&self, layer: u32) -> f64 {
        self.layer_similarity_overrides
            .get(&layer)
            .copied()
            .unwrap_or(self.target_similarity)
    }

    fn check(&self) -> Result<(), TraceError> {
        let bad = |m: String| Err(TraceError::InvalidParams(m));
        let in_unit = |r: f64| (0.0..=1.0).contains(&r);
        if !in_unit(self.target_similarity) {
            return bad(format!(
                "target_similarity {} outside [0, 1]",
                self.target_similarity
            ));
        }
        if let Some((l, r)) = self
            .layer_similarity_overrides
            .iter()
            .find(|(_, r)| !in_unit(**r))
        {
            return bad(format!("layer {l} similarity {r} outside [0, 1]"));
        }
        if !(self.recency_bias >= 0.0 && self.recency_bias.is_finite()) {
            return bad(format!(
                "recency_bias {} must be finite and >= 0",
                self.recency_bias
            ));
        }
        if !(self.mean_accept >= 1.0 && self.mean_accept < f64::from(u16::MAX)) {
            return bad(format!("mean_accept {} must be >= 1", self.mean_accept));
        }
        if self.num_layers == 0 || self.topk == 0 {
            return bad("num_layers and topk must be >= 1".into());
        }
        if u64::from(self.topk) > self.context_len {
            return Err(TraceError::TopkExceedsContext {
                topk: self.topk,
                context_len: self.context_len,
            });
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Age in `[0, n)` drawn with weight `(age + 1)^-bias`.
fn sample_age(rng: &mut ChaCha8Rng, n: u64, bias: f64) -> u64 {
    let u: f64 = rng.gen();
    let nf = n as f64;
    let x = if bias == 0.0 {
        return ((u * nf) as u64).min(n - 1);
    } else if (bias - 1.0).abs() < 1e-12 {
        (nf + 1.0).powf(u)
    } else {
        let e = 1.0 - bias;
        (1.0 + u * ((nf + 1.0).powf(e) - 1.0)).powf(1.0 / e)
    };
    ((x.floor() as u64).saturating_sub(1)).min(n - 1)
}

/// Generation-stamped membership over positions.
struct Marks {
    stamp: Vec<u32>,
    epoch: u32,
}

impl Marks {
    fn new(len: usize) -> Self {
        Self {
            stamp: vec![0; len],
            epoch: 0,
        }
    }

    fn clear(&mut self) {
        self.epoch += 1;
    }

    fn mark(&mut self, p: u32) {
        self.stamp[p as usize] = self.epoch;
    }

    fn is_marked(&self, p: u64) -> bool {
        self.stamp[p as usize] == self.epoch
    }
}

struct LayerProcess {
    rng: ChaCha8Rng,
    marks: Marks,
    retention: f64,
    bias: f64,
    topk: u64,
}

impl LayerProcess {
    fn pick(&mut self, n: u64) -> u32 {
        for _ in 0..WEIGHTED_TRIES {
            let pos = n - 1 - sample_age(&mut self.rng, n, self.bias);
            if !self.marks.is_marked(pos) {
                return pos as u32;
            }
        }
        for _ in 0..UNIFORM_TRIES {
            let pos = self.rng.gen_range(0..n);
            if !self.marks.is_marked(pos) {
                return pos as u32;
            }
        }
        let start = self.rng.gen_range(0..n);
        (0..n)
            .map(|i| (start + i) % n)
            .find(|&p| !self.marks.is_marked(p))
            .expect("caller guarantees a free position") as u32
    }

    /// Next set over history `n`, given the previous set (empty for a fresh draw).
    fn next(&mut self, prev: &[u32], n: u64) -> Vec<u32> {
        let k = self.topk.min(n) as usize;
        let mut set: Vec<u32> = prev
            .iter()
            .copied()
            .filter(|_| self.rng.gen::<f64>() < self.retention)
            .collect();
        set.truncate(k);
        let need = k - set.len();

        self.marks.clear();
        let avoid_prev = n - prev.len() as u64 >= need as u64;
        let excluded = if avoid_prev { prev } else { set.as_slice() };
        for &p in excluded {
            self.marks.mark(p);
        }
        for _ in 0..need {
            let p = self.pick(n);
            self.marks.mark(p);
            set.push(p);
        }
        set.sort_unstable();
        set
    }
}

fn draw_accepted(rng: &mut ChaCha8Rng, mean: f64) -> u16 {
    let base = mean.floor();
    let extra = u16::from(rng.gen::<f64>() < mean - base);
    base as u16 + extra
}

/// Per-step (or per-window) sorted entry sets of one layer.
type LayerSets = Vec<Vec<u32>>;

pub fn generate_trace(p: &TraceGenParams) -> Result<AccessTrace, TraceError> {
    p.check()?;
    let mut accept_rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, 0));
    let accepted: Vec<u16> = (0..p.num_steps)
        .map(|_| draw_accepted(&mut accept_rng, p.mean_accept))
        .collect();
    let mut lens = Vec::with_capacity(p.num_steps);
    let mut len = p.context_len;
    for &a in &accepted {
        lens.push(len);
        len += u64::from(a);
    }
    let final_len = len;

    let windows = (PREFILL_WINDOWS as u64).min(p.context_len) as usize;
    let per_layer: Vec<(LayerSets, LayerSets)> = (0..p.num_layers)
        .into_par_iter()
        .map(|layer| {
            let mut proc = LayerProcess {
                rng: ChaCha8Rng::seed_from_u64(mix_seed(p.seed, u64::from(layer) + 1)),
                marks: Marks::new(final_len as usize),
                retention: p.layer_similarity(layer),
                bias: p.recency_bias,
                topk: u64::from(p.topk),
            };
            let mut prev: Vec<u32> = Vec::new();
            let mut window_sets = Vec::with_capacity(windows);
            for j in 0..windows {
                let n = p.context_len - (windows - 1 - j) as u64;
                prev = proc.next(&prev, n);
                window_sets.push(prev.clone());
            }
            let mut step_sets = Vec::with_capacity(p.num_steps);
            for &n in &lens {
                prev = proc.next(&prev, n);
                step_sets.push(prev.clone());
            }
            (window_sets, step_sets)
        })
        .collect();

    let mut steps: Vec<StepAccess> = accepted
        .iter()
        .map(|&a| StepAccess {
            layers: Vec::with_capacity(p.num_layers as usize),
            tokens_accepted: a,
        })
        .collect();
    let mut prefill = Vec::with_capacity(p.num_layers as usize);
    for (window_sets, step_sets) in per_layer {
        for (t, set) in step_sets.into_iter().enumerate() {
            steps[t].layers.push(set);
        }
        prefill.push(window_sets);
    }
    Ok(AccessTrace {
        num_layers: p.num_layers,
        context_len: p.context_len,
        topk: p.topk,
        steps,
        prefill_windows: p.prefill_windows.then_some(prefill),
    })
}
