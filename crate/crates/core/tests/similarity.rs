use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsepool::trace::{
    generate_trace, intersection_len, intra_layer_similarity, similarity_summary, AccessTrace,
    StepAccess, TraceGenParams,
};
use sparsepool_testkit::{brute_force_similarity, random_trace, TraceShape};

proptest! {
    #[test]
    fn matches_hash_set_intersection(seed in any::<u64>()) {
        let trace = random_trace(&mut ChaCha8Rng::seed_from_u64(seed), &TraceShape::default());
        for layer in 0..trace.num_layers as usize {
            prop_assert_eq!(
                intra_layer_similarity(&trace, layer),
                brute_force_similarity(&trace, layer)
            );
        }
    }

    #[test]
    fn intersection_is_symmetric_and_bounded(
        a in proptest::collection::btree_set(0u32..200, 0..40),
        b in proptest::collection::btree_set(0u32..200, 0..40),
    ) {
        let a: Vec<u32> = a.into_iter().collect();
        let b: Vec<u32> = b.into_iter().collect();
        let n = intersection_len(&a, &b);
        prop_assert_eq!(n, intersection_len(&b, &a));
        prop_assert!(n <= a.len().min(b.len()));
        prop_assert_eq!(n, a.iter().filter(|x| b.contains(x)).count());
    }
}

#[test]
fn constant_trace_scores_one_everywhere() {
    let step = StepAccess {
        layers: vec![vec![1, 5, 9], vec![0, 2]],
        tokens_accepted: 1,
    };
    let trace = AccessTrace {
        num_layers: 2,
        context_len: 16,
        topk: 3,
        steps: vec![step; 20],
        prefill_windows: None,
    };
    for s in similarity_summary(&trace) {
        assert_eq!((s.mean, s.min, s.stdev), (1.0, 1.0, 0.0));
    }
}

#[test]
fn generator_hits_target_similarity() {
    for target in [0.5, 0.8, 0.9] {
        let trace = generate_trace(&TraceGenParams {
            target_similarity: target,
            num_layers: 4,
            context_len: 8192,
            topk: 256,
            num_steps: 200,
            ..TraceGenParams::default()
        })
        .unwrap();
        let summary = similarity_summary(&trace);
        let mean = summary.iter().map(|s| s.mean).sum::<f64>() / summary.len() as f64;
        assert!((mean - target).abs() <= 0.02, "target {target}, got {mean}");
    }
}
