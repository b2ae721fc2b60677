use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sparsepool::pipeline::{apply_tbo, layer_latency, layer_time, Strategy, TransferLoad};
use sparsepool_testkit::{critical_path, finish_times, random_layer_inputs, span_dag};

proptest! {
    #[test]
    fn latency_equals_longest_path(seed in any::<u64>()) {
        let (c, load, p) = random_layer_inputs(&mut ChaCha8Rng::seed_from_u64(seed));
        for s in Strategy::ALL {
            let dag = span_dag(s, &c, &load, &p);
            let t = layer_time(s, &c, &load, &p);
            prop_assert_eq!(t.layer_latency, critical_path(&dag));
            prop_assert_eq!(layer_latency(s, &c, &load, &p), t.layer_latency);
            prop_assert_eq!(t.spans.len(), dag.len());
            let ends = finish_times(&dag);
            for span in &t.spans {
                let node = dag.iter().find(|n| n.kind == span.kind).unwrap();
                prop_assert_eq!(span.end_us, ends[&span.kind]);
                for d in &node.deps {
                    prop_assert!(span.start_us >= ends[d]);
                }
            }
            let first = t.spans.iter().map(|x| x.start_us).fold(f64::INFINITY, f64::min);
            let last = t.spans.iter().map(|x| x.end_us).fold(0.0, f64::max);
            prop_assert_eq!(t.layer_latency, last - first);
        }
    }

    #[test]
    fn exposed_transfer_is_bounded(seed in any::<u64>()) {
        let (c, load, p) = random_layer_inputs(&mut ChaCha8Rng::seed_from_u64(seed));
        let serial = if p.duplex { load.h2d_us.max(load.d2h_us) } else { load.h2d_us + load.d2h_us };
        let tol = 1e-9 * (1.0 + c.indexer_us + c.pre_attn_us + c.attn_us + serial);
        let none = layer_time(Strategy::None, &c, &load, &p);
        prop_assert!((none.exposed_transfer - serial).abs() <= tol);
        for s in Strategy::ALL {
            let t = layer_time(s, &c, &load, &p);
            prop_assert!(t.exposed_transfer >= 0.0);
            prop_assert!(t.exposed_transfer <= serial + tol);
        }
    }

    #[test]
    fn latency_grows_with_transfer(seed in any::<u64>(), scale in 1.0f64..4.0) {
        let (c, load, p) = random_layer_inputs(&mut ChaCha8Rng::seed_from_u64(seed));
        let more = TransferLoad {
            h2d_us: load.h2d_us * scale,
            d2h_us: load.d2h_us * scale,
            miss_fraction: load.miss_fraction,
        };
        for s in Strategy::ALL {
            prop_assert!(layer_latency(s, &c, &more, &p) >= layer_latency(s, &c, &load, &p));
        }
    }

    #[test]
    fn tbo_never_slower_without_overhead(compute in 0.0f64..1e4, comm in 0.0f64..1e4) {
        prop_assert!(apply_tbo(compute, comm, true, 0.0) <= apply_tbo(compute, comm, false, 0.0));
        prop_assert_eq!(apply_tbo(compute, comm, false, 0.5), compute + comm);
    }
}
