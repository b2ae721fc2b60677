use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsepool::cache::{pool_capacity, replay, replay_layer, SparsePool, WarmStart};
use sparsepool_testkit::{
    capacity_percent, oracle_replay_layer, random_trace, LinearLru, TraceShape,
};

fn warm_starts(has_windows: bool) -> Vec<WarmStart> {
    let mut w = vec![WarmStart::Cold, WarmStart::FullHistory];
    if has_windows {
        w.push(WarmStart::PrefillWindows);
    }
    w
}

proptest! {
    #[test]
    fn replay_matches_linear_scan_lru(seed in any::<u64>(), percent in 1u64..=100) {
        let trace = random_trace(&mut ChaCha8Rng::seed_from_u64(seed), &TraceShape::default());
        let ratio = percent as f64 / 100.0;
        for warm in warm_starts(trace.prefill_windows.is_some()) {
            for layer in 0..trace.num_layers as usize {
                prop_assert_eq!(
                    replay_layer(&trace, layer, ratio, warm).unwrap(),
                    oracle_replay_layer(&trace, layer, percent, warm)
                );
            }
        }
    }

    #[test]
    fn capacity_formula_is_exact_on_percent_grid(percent in 1u64..=100, len in 0u64..1_000_000) {
        prop_assert_eq!(pool_capacity(percent as f64 / 100.0, len), capacity_percent(percent, len));
    }

    #[test]
    fn pool_contents_track_oracle_step_by_step(
        cap in 1usize..=64,
        steps in proptest::collection::vec(proptest::collection::btree_set(0u32..96, 0..24), 1..60),
    ) {
        let mut pool = SparsePool::new(cap).unwrap();
        let mut oracle = LinearLru::new(cap);
        for set in steps {
            let req: Vec<u32> = set.into_iter().collect();
            let res = pool.access_step(&req).unwrap();
            let expected_misses = oracle.access(&req);
            prop_assert_eq!(res.miss_ids.len(), expected_misses);
            prop_assert_eq!(res.hit_ids.len() + res.miss_ids.len(), req.len());
            prop_assert_eq!(pool.resident_ids(), oracle.resident());
            prop_assert!(pool.len() <= cap);
            prop_assert_eq!(res.transient_ids.len(), req.len().saturating_sub(cap));
            for id in &res.evicted_ids {
                prop_assert!(req.binary_search(id).is_err());
            }
        }
    }

    #[test]
    fn misses_never_grow_with_ratio(seed in any::<u64>(), lo in 1u64..100, gap in 1u64..100) {
        let trace = random_trace(&mut ChaCha8Rng::seed_from_u64(seed), &TraceShape::default());
        let hi = (lo + gap).min(100);
        for warm in warm_starts(trace.prefill_windows.is_some()) {
            let small = replay(&trace, lo as f64 / 100.0, warm).unwrap();
            let large = replay(&trace, hi as f64 / 100.0, warm).unwrap();
            for (a, b) in small.misses.iter().zip(&large.misses) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert!(y <= x, "ratio {hi}% missed {y} > {x} at {lo}%");
                }
            }
        }
    }

    #[test]
    fn full_history_at_ratio_one_never_misses(seed in any::<u64>()) {
        let trace = random_trace(&mut ChaCha8Rng::seed_from_u64(seed), &TraceShape::default());
        prop_assert_eq!(replay(&trace, 1.0, WarmStart::FullHistory).unwrap().total(), 0);
    }
}
