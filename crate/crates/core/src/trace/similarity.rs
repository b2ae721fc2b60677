//! Intra-layer similarity: the share of a step's top-K set that the same
//! layer already selected at the previous step.

use serde::Serialize;

use super::AccessTrace;

/// Size of the intersection of two strictly increasing slices.
pub fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `r_t = |K_{t-1} ∩ K_t| / |K_t|` for `t >= 1`. Empty for single-step
/// traces. A step with an empty set scores 0.
pub fn intra_layer_similarity(trace: &AccessTrace, layer: usize) -> Vec<f64> {
    assert!(
        layer < trace.num_layers as usize,
        "layer {layer} out of range"
    );
    trace
        .steps
        .windows(2)
        .map(|w| {
            let prev = &w[0].layers[layer];
            let cur = &w[1].layers[layer];
            if cur.is_empty() {
                0.0
            } else {
                intersection_len(prev, cur) as f64 / cur.len() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub stdev: f64,
    pub min: f64,
}

pub fn similarity_summary(trace: &AccessTrace) -> Vec<LayerSimilarity> {
    (0..trace.num_layers as usize)
        .map(|layer| {
            let r = intra_layer_similarity(trace, layer);
            let n = r.len().max(1) as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            LayerSimilarity {
                layer,
                mean,
                stdev: var.sqrt(),
                min: r.iter().copied().fold(f64::INFINITY, f64::min).min(1.0),
            }
        })
        .collect()
}
