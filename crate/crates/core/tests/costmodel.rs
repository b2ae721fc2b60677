use proptest::prelude::*;

use sparsepool::costmodel::{
    synthetic_profile, CostSource, CostTable, Direction, Op, ParametricForm, TransferMode,
    TransferModel,
};

fn per_call() -> TransferModel {
    TransferModel {
        mode: TransferMode::PerCall,
        per_call_overhead_h2d_us: TransferModel::overhead_for_effective(656.0, 37.0, 0.79),
        per_call_overhead_d2h_us: TransferModel::overhead_for_effective(656.0, 43.0, 0.23),
        ..TransferModel::batched(37.0, 43.0, 656.0)
    }
}

proptest! {
    #[test]
    fn batched_time_is_linear_in_blocks(a in 0.0f64..1e5, b in 0.0f64..1e5) {
        let m = TransferModel::batched(37.0, 43.0, 656.0);
        for dir in [Direction::H2d, Direction::D2h] {
            let sum = m.transfer_time(a, dir) + m.transfer_time(b, dir);
            let joint = m.transfer_time(a + b, dir);
            prop_assert!((sum - joint).abs() <= 1e-9 * joint.max(1.0));
        }
    }

    #[test]
    fn per_call_is_never_faster(blocks in 1.0f64..1e5) {
        let fast = TransferModel::batched(37.0, 43.0, 656.0);
        let slow = per_call();
        for dir in [Direction::H2d, Direction::D2h] {
            prop_assert!(slow.transfer_time(blocks, dir) >= fast.transfer_time(blocks, dir));
            prop_assert!(slow.effective_bandwidth_gbs(blocks, dir) <= fast.bandwidth_gbs(dir));
        }
    }

    #[test]
    fn table_lookup_stays_within_cell_corners(bf in 0.0f64..1.0, cf in 0.0f64..1.0, op_i in 0usize..8) {
        let table = synthetic_profile();
        let op = Op::ALL[op_i];
        let g = table.grid(op);
        // middle cell of each axis; single-knot axes collapse to that knot
        let cell = |knots: &[f64], f: f64| {
            let i = knots.len().saturating_sub(2) / 2;
            let j = (i + 1).min(knots.len() - 1);
            (knots[i], knots[j], knots[i] + f * (knots[j] - knots[i]))
        };
        let (b0, b1, b) = cell(&g.batches, bf);
        let (c0, c1, c) = cell(&g.contexts, cf);
        let corners = [
            table.op_time(op, b0, c0),
            table.op_time(op, b1, c0),
            table.op_time(op, b0, c1),
            table.op_time(op, b1, c1),
        ];
        let v = table.op_time(op, b, c);
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(0.0, f64::max);
        prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
    }

    #[test]
    fn lookups_are_non_decreasing_in_batch(b in 1.0f64..4000.0, db in 0.0f64..4000.0, c in 1024.0f64..200_000.0) {
        let table = synthetic_profile();
        for op in Op::ALL {
            prop_assert!(table.op_time(op, b + db, c) + 1e-9 >= table.op_time(op, b, c));
        }
    }
}

#[test]
fn realized_grid_reproduces_the_form_at_knots() {
    let form = ParametricForm::synthetic_default();
    let table = synthetic_profile();
    for op in Op::ALL {
        let g = table.grid(op);
        for &b in &g.batches {
            for &c in g.contexts.iter().filter(|_| !op.context_free()) {
                let want = form.op_time(op, b, c);
                let got = table.op_time(op, b, c);
                assert!(
                    (got - want).abs() <= 1e-9 * want.max(1.0),
                    "{op} at ({b}, {c})"
                );
            }
        }
    }
}

#[test]
fn saved_table_loads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("profile.csv");
    let table = synthetic_profile();
    table.save(&path).unwrap();
    assert_eq!(CostTable::load(&path).unwrap(), table);
}
