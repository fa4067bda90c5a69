//! Property tests over randomized inputs.

use ivpt_core::ar::topk_select;
use ivpt_core::data::{corrupt, gen_pattern_task, NoiseSpec};
use ivpt_core::tape::Tape;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // softmax rows sum to 1 within 1e-12 for any finite input with |x| <= 50
    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-50.0f64..50.0, 1..24)) {
        let mut tape = Tape::new();
        let n = xs.len();
        let x = tape.leaf_raw(1, n, xs, false).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let vals = tape.value(y);
        let sum: f64 = vals.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        prop_assert!(vals.iter().all(|&v| v > 0.0));
    }

    // the selected index set ignores any constant shift of the saliences
    #[test]
    fn topk_selection_ignores_constant_shifts(
        w in prop::collection::vec(0.0f64..1.0, 1..32),
        c in -100.0f64..100.0,
        k_frac in 0.0f64..=1.0,
    ) {
        let k = ((w.len() as f64) * k_frac) as usize;
        let base = topk_select(&w, k.min(w.len()), 0).unwrap();
        let shifted: Vec<f64> = w.iter().map(|v| v + c).collect();
        let moved = topk_select(&shifted, k.min(w.len()), 0).unwrap();
        prop_assert_eq!(base.omega, moved.omega);
    }

    // rho = 0 corruption is the bit-exact identity for any sample and index
    #[test]
    fn zero_rate_corruption_is_identity(seed in any::<u64>(), idx in 0usize..64) {
        let sample = gen_pattern_task(1, 4, 16, 16, seed).unwrap().remove(0);
        let out = corrupt(&sample, &NoiseSpec { rho: 0.0, ..NoiseSpec::default() }, idx).unwrap();
        prop_assert!(sample
            .image
            .values()
            .iter()
            .zip(out.image.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    // grad of sum(x * c) w.r.t. x is exactly c, for any finite c
    #[test]
    fn linear_gradients_are_exact(c in prop::collection::vec(-1e3f64..1e3, 1..16)) {
        let mut tape = Tape::new();
        let n = c.len();
        let x = tape.leaf_raw(1, n, vec![1.0; n], true).unwrap();
        let w = tape.leaf_raw(1, n, c.clone(), false).unwrap();
        let prod = tape.mul(x, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        prop_assert!(g.iter().zip(c.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
