use proptest::prelude::*;

use sparsepool::scenario::{max_batch_size, ratio_for_batch, HardwareSpec, ModelSpec};

proptest! {
    #[test]
    fn capacity_is_monotone(ctx in 1024u64..300_000, dctx in 0u64..100_000, r in 1u32..=100, dr in 0u32..=100) {
        let m = ModelSpec::default();
        let hw = HardwareSpec::default();
        let ratio = f64::from(r) / 100.0;
        let more = (f64::from(r + dr) / 100.0).min(1.0);
        let base = max_batch_size(&m, &hw, ctx, ratio).unwrap();
        prop_assert!(max_batch_size(&m, &hw, ctx + dctx, ratio).unwrap() <= base);
        prop_assert!(max_batch_size(&m, &hw, ctx, more).unwrap() <= base);
    }

    #[test]
    fn chosen_ratio_fits_and_is_the_largest(batch in 1u32..400) {
        let m = ModelSpec::default();
        let hw = HardwareSpec::default();
        match ratio_for_batch(&m, &hw, 32_768, batch, 0.01).unwrap() {
            Some(r) => {
                prop_assert!(max_batch_size(&m, &hw, 32_768, r).unwrap() >= batch);
                let next = r + 0.01;
                if next <= 1.0 {
                    prop_assert!(max_batch_size(&m, &hw, 32_768, next).unwrap() < batch);
                }
            }
            None => prop_assert!(max_batch_size(&m, &hw, 32_768, 0.01).unwrap() < batch),
        }
    }
}
