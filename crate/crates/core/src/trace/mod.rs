//! Latent-cache access traces.
//!
//! A trace records, for every decode step and layer, the sorted top-K set of
//! entry positions the indexer selected, plus how many tokens the step
//! appended. Optional prefill windows hold the selections made at the tail of
//! prefill and feed LRU warm-up.

mod format;
mod generate;
mod similarity;

pub use format::{
    decode_trace, encode_trace, encoded_version, read_trace, write_trace, TraceFormatError,
    FORMAT_VERSION, MAGIC, SUPPORTED_VERSIONS,
};
pub use generate::{generate_trace, TraceGenParams, PREFILL_WINDOWS};
pub use similarity::{
    intersection_len, intra_layer_similarity, similarity_summary, LayerSimilarity,
};

use std::fmt;

use thiserror::Error;

/// Where in a trace a set lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetLocation {
    Step(usize),
    Window(usize),
}

impl fmt::Display for SetLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Step(t) => write!(f, "step {t}"),
            Self::Window(w) => write!(f, "prefill window {w}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("{at}, layer {layer}: index {index} outside [0, {limit})")]
    OutOfRange {
        at: SetLocation,
        layer: usize,
        index: u32,
        limit: u64,
    },
    #[error("{at}, layer {layer}: indices not strictly increasing at position {position}")]
    NotSorted {
        at: SetLocation,
        layer: usize,
        position: usize,
    },
    #[error("{at}, layer {layer}: {len} entries exceed top-k {topk}")]
    TooLarge {
        at: SetLocation,
        layer: usize,
        len: usize,
        topk: u32,
    },
    #[error("{at}: expected {expected} layers, found {found}")]
    LayerCount {
        at: SetLocation,
        expected: usize,
        found: usize,
    },
    #[error("top-k {topk} exceeds context {context_len}")]
    TopkExceedsContext { topk: u32, context_len: u64 },
    #[error("invalid generator parameter: {0}")]
    InvalidParams(String),
}

/// Selections for one decode step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepAccess {
    /// Per-layer strictly increasing entry positions.
    pub layers: Vec<Vec<u32>>,
    /// Entries appended after this step (realized MTP acceptance).
    pub tokens_accepted: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTrace {
    pub num_layers: u32,
    /// Prefill length at decode start.
    pub context_len: u64,
    pub topk: u32,
    pub steps: Vec<StepAccess>,
    /// `[layer][window]`, oldest window first.
    pub prefill_windows: Option<Vec<Vec<Vec<u32>>>>,
}

impl AccessTrace {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// History length visible to step `t`: prefill plus everything appended
    /// by earlier steps.
    pub fn history_len(&self, t: usize) -> u64 {
        self.context_len
            + self.steps[..t]
                .iter()
                .map(|s| u64::from(s.tokens_accepted))
                .sum::<u64>()
    }

    /// Per-step history lengths, one entry per step plus the final length.
    pub fn history_lens(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        let mut len = self.context_len;
        out.push(len);
        for s in &self.steps {
            len += u64::from(s.tokens_accepted);
            out.push(len);
        }
        out
    }

    pub fn layer_sets(&self, layer: usize) -> impl Iterator<Item = &[u32]> + '_ {
        self.steps.iter().map(move |s| s.layers[layer].as_slice())
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), TraceError> {
        let layers = self.num_layers as usize;
        let lens = self.history_lens();
        for (t, step) in self.steps.iter().enumerate() {
            let at = SetLocation::Step(t);
            if step.layers.len() != layers {
                return Err(TraceError::LayerCount {
                    at,
                    expected: layers,
                    found: step.layers.len(),
                });
            }
            for (l, set) in step.layers.iter().enumerate() {
                check_set(set, at, l, lens[t], self.topk)?;
            }
        }
        if let Some(windows) = &self.prefill_windows {
            if windows.len() != layers {
                return Err(TraceError::LayerCount {
                    at: SetLocation::Window(0),
                    expected: layers,
                    found: windows.len(),
                });
            }
            for (l, per_layer) in windows.iter().enumerate() {
                for (w, set) in per_layer.iter().enumerate() {
                    check_set(set, SetLocation::Window(w), l, self.context_len, self.topk)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_set(
    set: &[u32],
    at: SetLocation,
    layer: usize,
    limit: u64,
    topk: u32,
) -> Result<(), TraceError> {
    if set.len() > topk as usize {
        return Err(TraceError::TooLarge {
            at,
            layer,
            len: set.len(),
            topk,
        });
    }
    for (i, &index) in set.iter().enumerate() {
        if u64::from(index) >= limit {
            return Err(TraceError::OutOfRange {
                at,
                layer,
                index,
                limit,
            });
        }
        if i > 0 && set[i - 1] >= index {
            return Err(TraceError::NotSorted {
                at,
                layer,
                position: i,
            });
        }
    }
    Ok(())
}
