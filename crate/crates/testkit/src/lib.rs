//! Reference oracles and random inputs shared by the test suites.
//!
//! Each oracle is a deliberately naive restatement of one library
//! computation: hash-set intersections for similarity, a linear-scan LRU
//! list for pool replay, and a memoized longest path for span timelines.

use std::collections::{HashMap, HashSet};

use rand::seq::index::sample;
use rand::Rng;

use sparsepool::cache::WarmStart;
use sparsepool::pipeline::{LayerCosts, OverlapParams, SpanKind, Strategy, TransferLoad};
use sparsepool::trace::{AccessTrace, StepAccess};

/// Bounds for [`random_trace`].
#[derive(Debug, Clone, Copy)]
pub struct TraceShape {
    pub max_layers: u32,
    pub min_context: u64,
    pub max_context: u64,
    pub max_topk: u32,
    pub max_steps: usize,
    pub max_accept: u16,
    pub max_windows: usize,
}

impl Default for TraceShape {
    fn default() -> Self {
        Self {
            max_layers: 3,
            min_context: 16,
            max_context: 64,
            max_topk: 16,
            max_steps: 100,
            max_accept: 3,
            max_windows: 6,
        }
    }
}

fn random_set(rng: &mut impl Rng, prev: &[u32], keep: f64, len: u64, topk: u32) -> Vec<u32> {
    let k = rng.gen_range(0..=topk.min(len as u32)) as usize;
    let mut set: Vec<u32> = prev
        .iter()
        .copied()
        .filter(|_| rng.gen_bool(keep))
        .take(k)
        .collect();
    let mut present: HashSet<u32> = set.iter().copied().collect();
    while set.len() < k {
        let id = rng.gen_range(0..len) as u32;
        if present.insert(id) {
            set.push(id);
        }
    }
    set.sort_unstable();
    set
}

/// A structurally valid trace with per-trace random overlap between steps.
pub fn random_trace(rng: &mut impl Rng, shape: &TraceShape) -> AccessTrace {
    let num_layers = rng.gen_range(1..=shape.max_layers);
    let context_len = rng.gen_range(shape.min_context..=shape.max_context);
    let topk = rng.gen_range(1..=shape.max_topk.min(context_len as u32));
    let num_steps = rng.gen_range(1..=shape.max_steps);
    let keep = rng.gen_range(0.0..1.0);

    let windows = (shape.max_windows > 0 && rng.gen_bool(0.7)).then(|| {
        let n = rng.gen_range(0..=shape.max_windows);
        (0..num_layers)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let k = rng.gen_range(0..=topk) as usize;
                        let mut w: Vec<u32> = sample(rng, context_len as usize, k)
                            .into_iter()
                            .map(|i| i as u32)
                            .collect();
                        w.sort_unstable();
                        w
                    })
                    .collect()
            })
            .collect()
    });

    let mut len = context_len;
    let mut prev: Vec<Vec<u32>> = vec![Vec::new(); num_layers as usize];
    let mut steps = Vec::with_capacity(num_steps);
    for _ in 0..num_steps {
        let layers: Vec<Vec<u32>> = prev
            .iter()
            .map(|p| random_set(rng, p, keep, len, topk))
            .collect();
        let tokens_accepted = rng.gen_range(0..=shape.max_accept);
        len += u64::from(tokens_accepted);
        prev.clone_from(&layers);
        steps.push(StepAccess {
            layers,
            tokens_accepted,
        });
    }
    AccessTrace {
        num_layers,
        context_len,
        topk,
        steps,
        prefill_windows: windows,
    }
}

/// Per-step similarity from hash-set intersections.
pub fn brute_force_similarity(trace: &AccessTrace, layer: usize) -> Vec<f64> {
    (1..trace.steps.len())
        .map(|t| {
            let prev: HashSet<u32> = trace.steps[t - 1].layers[layer].iter().copied().collect();
            let cur = &trace.steps[t].layers[layer];
            if cur.is_empty() {
                return 0.0;
            }
            let shared = cur.iter().filter(|id| prev.contains(id)).count();
            shared as f64 / cur.len() as f64
        })
        .collect()
}

/// LRU list kept as unordered `(id, last_use)` pairs; every lookup and
/// eviction scans the whole list.
#[derive(Debug, Clone)]
pub struct LinearLru {
    pub capacity: usize,
    entries: Vec<(u32, u64)>,
    clock: u64,
}

impl LinearLru {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            clock: 0,
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.iter().any(|e| e.0 == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resident(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.entries.iter().map(|e| e.0).collect();
        v.sort_unstable();
        v
    }

    fn touch(&mut self, id: u32) {
        self.clock += 1;
        match self.entries.iter_mut().find(|e| e.0 == id) {
            Some(e) => e.1 = self.clock,
            None => self.entries.push((id, self.clock)),
        }
    }

    /// Drops least recently used entries until within capacity.
    pub fn shrink(&mut self) -> Vec<u32> {
        let mut out = Vec::new();
        while self.entries.len() > self.capacity {
            let oldest = (0..self.entries.len())
                .min_by_key(|&i| self.entries[i].1)
                .expect("non-empty");
            out.push(self.entries.swap_remove(oldest).0);
        }
        out
    }

    /// Inserts one id at a time, evicting after each.
    pub fn insert_each(&mut self, ids: impl IntoIterator<Item = u32>) {
        for id in ids {
            self.touch(id);
            self.shrink();
        }
    }

    /// One decode step: misses are judged before any update, then every
    /// requested id is used in ascending order and the list is trimmed.
    pub fn access(&mut self, requested: &[u32]) -> usize {
        let misses = requested.iter().filter(|&&id| !self.contains(id)).count();
        for &id in requested {
            self.touch(id);
        }
        self.shrink();
        misses
    }
}

/// Pool slots for `percent`% of `len` entries, never fewer than one.
pub fn capacity_percent(percent: u64, len: u64) -> usize {
    ((percent * len) / 100).max(1) as usize
}

/// Per-step misses of one layer at a ratio of `percent`%.
pub fn oracle_replay_layer(
    trace: &AccessTrace,
    layer: usize,
    percent: u64,
    warm: WarmStart,
) -> Vec<u32> {
    let mut lru = LinearLru::new(capacity_percent(percent, trace.context_len));
    match warm {
        WarmStart::Cold => {}
        WarmStart::PrefillWindows => {
            let windows = trace.prefill_windows.as_ref().expect("trace has windows");
            for w in &windows[layer] {
                lru.insert_each(w.iter().copied());
            }
        }
        WarmStart::FullHistory => lru.insert_each(0..trace.context_len as u32),
    }
    let mut len = trace.context_len;
    let mut out = Vec::new();
    for step in &trace.steps {
        out.push(lru.access(&step.layers[layer]) as u32);
        let next = len + u64::from(step.tokens_accepted);
        lru.capacity = capacity_percent(percent, next);
        lru.shrink();
        lru.insert_each(len as u32..next as u32);
        len = next;
    }
    out
}

/// One node of a layer's span graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DagNode {
    pub kind: SpanKind,
    pub duration: f64,
    pub deps: Vec<SpanKind>,
}

fn node(kind: SpanKind, duration: f64, deps: &[SpanKind]) -> DagNode {
    DagNode {
        kind,
        duration,
        deps: deps.to_vec(),
    }
}

/// Span graph of one layer: durations and dependency edges per strategy.
pub fn span_dag(
    strategy: Strategy,
    c: &LayerCosts,
    load: &TransferLoad,
    p: &OverlapParams,
) -> Vec<DagNode> {
    use SpanKind::*;
    let q = load.miss_fraction.clamp(0.0, 1.0);
    let merge = if load.miss_fraction > 0.0 {
        c.merge_us
    } else {
        0.0
    };
    let write_back_after =
        |inline: SpanKind, serial: SpanKind| if p.duplex { inline } else { serial };
    match strategy {
        Strategy::None => vec![
            node(Attn, c.attn_us, &[H2d, D2h]),
            node(D2h, load.d2h_us, &[write_back_after(Indexer, H2d)]),
            node(H2d, load.h2d_us, &[Indexer]),
            node(Indexer, c.indexer_us, &[PreAttn]),
            node(PreAttn, c.pre_attn_us, &[]),
        ],
        Strategy::Da => vec![
            node(Merge, merge, &[Attn1]),
            node(Attn1, c.attn_us * q, &[H2d, Attn0]),
            node(D2h, load.d2h_us, &[write_back_after(Indexer, H2d)]),
            node(H2d, load.h2d_us, &[Indexer]),
            node(Attn0, c.attn_us * (1.0 - q), &[PreAttn]),
            node(PreAttn, c.pre_attn_us, &[Indexer]),
            node(Indexer, c.indexer_us, &[]),
        ],
        Strategy::Dba => {
            let f = p.split;
            vec![
                node(Merge, merge, &[Attn1]),
                node(Attn1, c.attn_us * q, &[H2dB, Attn0]),
                node(Attn0, c.attn_us * (1.0 - q), &[PreAttn]),
                node(D2h, load.d2h_us, &[write_back_after(IndexerB, H2dB)]),
                node(H2dB, (1.0 - f) * load.h2d_us, &[H2d, IndexerB]),
                node(PreAttn, c.pre_attn_us, &[H2d, IndexerB]),
                node(H2d, f * load.h2d_us, &[Indexer]),
                node(IndexerB, p.eta * (1.0 - f) * c.indexer_us, &[Indexer]),
                node(Indexer, p.eta * f * c.indexer_us, &[]),
            ]
        }
    }
}

/// Earliest finish time of every node, by memoized recursion over edges.
pub fn finish_times(nodes: &[DagNode]) -> HashMap<SpanKind, f64> {
    fn visit(k: SpanKind, nodes: &[DagNode], memo: &mut HashMap<SpanKind, f64>) -> f64 {
        if let Some(&v) = memo.get(&k) {
            return v;
        }
        let n = nodes
            .iter()
            .find(|n| n.kind == k)
            .expect("dependency declared");
        let mut start = 0.0f64;
        for &d in &n.deps {
            start = start.max(visit(d, nodes, memo));
        }
        let end = start + n.duration;
        memo.insert(k, end);
        end
    }
    let mut memo = HashMap::new();
    for n in nodes {
        visit(n.kind, nodes, &mut memo);
    }
    memo
}

/// Length of the longest dependency chain.
pub fn critical_path(nodes: &[DagNode]) -> f64 {
    finish_times(nodes).values().copied().fold(0.0, f64::max)
}

/// Costs, transfer load and overlap parameters with occasional zeros.
pub fn random_layer_inputs(rng: &mut impl Rng) -> (LayerCosts, TransferLoad, OverlapParams) {
    let mut t = |hi: f64| {
        if rng.gen_bool(0.1) {
            0.0
        } else {
            rng.gen_range(0.0..hi)
        }
    };
    let costs = LayerCosts {
        indexer_us: t(2000.0),
        pre_attn_us: t(500.0),
        attn_us: t(1000.0),
        merge_us: t(50.0),
        dense_us: t(500.0),
        dispatch_us: t(500.0),
        combine_us: t(500.0),
    };
    let load = TransferLoad {
        h2d_us: t(3000.0),
        d2h_us: t(100.0),
        miss_fraction: t(1.0),
    };
    let params = OverlapParams {
        split: rng.gen_range(0.05..0.95),
        eta: rng.gen_range(1.0..2.0),
        duplex: rng.gen_bool(0.7),
    };
    (costs, load, params)
}
