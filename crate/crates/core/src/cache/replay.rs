//! Trace replay: one pool per (request, layer), one miss count per step.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pool::SparsePool;
use super::CacheError;
use crate::trace::AccessTrace;

/// Initial pool contents before step 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    Cold,
    /// Insert the prefill-window selections, oldest first.
    PrefillWindows,
    /// Insert every prefill position in order.
    FullHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissProfile {
    pub sparse_ratio: f64,
    pub topk: u32,
    /// Requests summed into each count.
    pub requests: u32,
    /// `misses[layer][step]`.
    pub misses: Vec<Vec<u32>>,
}

/// Pool slots for a history of `len` entries.
pub fn pool_capacity(ratio: f64, len: u64) -> usize {
    ((ratio * len as f64 * (1.0 + 1e-12)).floor() as usize).max(1)
}

fn check_ratio(ratio: f64) -> Result<(), CacheError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(CacheError::InvalidRatio(ratio))
    }
}

/// Replays one layer of one request and returns per-step miss counts.
pub fn replay_layer(
    trace: &AccessTrace,
    layer: usize,
    ratio: f64,
    warm: WarmStart,
) -> Result<Vec<u32>, CacheError> {
    check_ratio(ratio)?;
    let lens = trace.history_lens();
    let mut pool = SparsePool::new(pool_capacity(ratio, trace.context_len))?;
    match warm {
        WarmStart::Cold => {}
        WarmStart::PrefillWindows => {
            let windows = trace
                .prefill_windows
                .as_ref()
                .ok_or(CacheError::MissingWindows)?;
            pool.warmup(windows[layer].iter().map(Vec::as_slice));
        }
        WarmStart::FullHistory => {
            let all: Vec<u32> = (0..trace.context_len as u32).collect();
            pool.warmup([all.as_slice()]);
        }
    }
    let mut out = Vec::with_capacity(trace.num_steps());
    let mut new_ids = Vec::new();
    for (t, step) in trace.steps.iter().enumerate() {
        let res = pool.access_step(&step.layers[layer])?;
        out.push(res.miss_ids.len() as u32);
        pool.set_capacity(pool_capacity(ratio, lens[t + 1]))?;
        new_ids.clear();
        new_ids.extend(lens[t] as u32..lens[t + 1] as u32);
        pool.append_generated(&new_ids)?;
    }
    Ok(out)
}

/// Single-request replay over every layer, layers in parallel.
pub fn replay(trace: &AccessTrace, ratio: f64, warm: WarmStart) -> Result<MissProfile, CacheError> {
    trace.validate()?;
    let misses = (0..trace.num_layers as usize)
        .into_par_iter()
        .map(|l| replay_layer(trace, l, ratio, warm))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MissProfile {
        sparse_ratio: ratio,
        topk: trace.topk,
        requests: 1,
        misses,
    })
}

/// Replays one trace per request and sums their miss counts per step.
pub fn replay_batch(
    traces: &[AccessTrace],
    ratio: f64,
    warm: WarmStart,
) -> Result<MissProfile, CacheError> {
    let first = traces.first().ok_or(CacheError::EmptyBatch)?;
    let shape = (first.num_layers, first.num_steps());
    if let Some(bad) = traces
        .iter()
        .position(|t| (t.num_layers, t.num_steps()) != shape)
    {
        return Err(CacheError::ShapeMismatch { request: bad });
    }
    let profiles = traces
        .par_iter()
        .map(|t| replay(t, ratio, warm))
        .collect::<Result<Vec<_>, _>>()?;
    let mut misses = profiles[0].misses.clone();
    for p in &profiles[1..] {
        for (acc, layer) in misses.iter_mut().zip(&p.misses) {
            for (a, m) in acc.iter_mut().zip(layer) {
                *a += m;
            }
        }
    }
    Ok(MissProfile {
        sparse_ratio: ratio,
        topk: first.topk,
        requests: traces.len() as u32,
        misses,
    })
}

#[derive(Serialize, Deserialize)]
struct LongRow {
    layer: usize,
    step: usize,
    misses: u32,
}

#[derive(Serialize, Deserialize)]
struct SummaryRow {
    layer: usize,
    mean_misses: f64,
    min: u32,
    max: u32,
}

impl MissProfile {
    pub fn num_layers(&self) -> usize {
        self.misses.len()
    }

    pub fn num_steps(&self) -> usize {
        self.misses.first().map_or(0, Vec::len)
    }

    /// Mean misses per step for each layer.
    pub fn layer_means(&self) -> Vec<f64> {
        self.misses
            .iter()
            .map(|s| s.iter().map(|&m| f64::from(m)).sum::<f64>() / s.len().max(1) as f64)
            .collect()
    }

    pub fn layer_min(&self, layer: usize) -> u32 {
        self.misses[layer].iter().copied().min().unwrap_or(0)
    }

    pub fn layer_max(&self, layer: usize) -> u32 {
        self.misses[layer].iter().copied().max().unwrap_or(0)
    }

    /// Mean of every (layer, step) count.
    pub fn aggregate_mean(&self) -> f64 {
        let means = self.layer_means();
        means.iter().sum::<f64>() / means.len().max(1) as f64
    }

    pub fn total(&self) -> u64 {
        self.misses.iter().flatten().map(|&m| u64::from(m)).sum()
    }

    /// Misses summed over all layers and the first `steps` steps.
    pub fn total_first_steps(&self, steps: usize) -> u64 {
        self.misses
            .iter()
            .flat_map(|s| s.iter().take(steps))
            .map(|&m| u64::from(m))
            .sum()
    }

    /// Per-step miss counts, one per layer.
    pub fn step(&self, t: usize) -> Vec<u32> {
        self.misses.iter().map(|s| s[t]).collect()
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), CacheError> {
        let mut w = csv::Writer::from_writer(writer);
        for (layer, s) in self.misses.iter().enumerate() {
            for (step, &misses) in s.iter().enumerate() {
                w.serialize(LongRow {
                    layer,
                    step,
                    misses,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, writer: impl Write) -> Result<(), CacheError> {
        let mut w = csv::Writer::from_writer(writer);
        for (layer, mean) in self.layer_means().into_iter().enumerate() {
            w.serialize(SummaryRow {
                layer,
                mean_misses: mean,
                min: self.layer_min(layer),
                max: self.layer_max(layer),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-layer mean misses from either the per-step CSV
/// (`layer,step,misses`) or the summary CSV (`layer,mean_misses,min,max`).
/// Layers must be exactly `0..n`.
pub fn read_layer_means(reader: impl Read) -> Result<Vec<f64>, CacheError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let summary = headers.iter().any(|h| h == "mean_misses");
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut add = |layer: usize, v: f64| {
        if sums.len() <= layer {
            sums.resize(layer + 1, (0.0, 0));
        }
        sums[layer].0 += v;
        sums[layer].1 += 1;
    };
    if summary {
        for row in rdr.deserialize::<SummaryRow>() {
            let row = row?;
            add(row.layer, row.mean_misses);
        }
    } else {
        for row in rdr.deserialize::<LongRow>() {
            let row = row?;
            add(row.layer, f64::from(row.misses));
        }
    }
    if sums.is_empty() {
        return Err(CacheError::MissingLayer(0));
    }
    sums.into_iter()
        .enumerate()
        .map(|(l, (s, n))| {
            if n == 0 {
                Err(CacheError::MissingLayer(l))
            } else {
                Ok(s / n as f64)
            }
        })
        .collect()
}
