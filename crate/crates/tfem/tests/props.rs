//! Property tests for the module invariants: softmax normalization, metric
//! symmetries, the hardmax gap bound, Lloyd monotonicity, and linearity of
//! fitted feature expansions.

use proptest::prelude::*;
use tfem::approx::{fit_relu_features, hardmax_gap_bound, Target};
use tfem::classical::{kmeanspp, lloyd};
use tfem::construct::extract_assignments;
use tfem::gmm::{generate_instance, one_hot, perm_loss};
use tfem::linalg::{softmax_cols, Mat};

fn small_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..=10)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_columns_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64 / (1u64 << 31) as f64) * 20.0 - 10.0
        };
        let m = Mat::from_fn(rows, cols, |_, _| next());
        let s = softmax_cols(&m);
        for j in 0..cols {
            let sum: f64 = (0..rows).map(|i| s.get(i, j)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for i in 0..rows {
                prop_assert!(s.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn hardmax_gap_never_exceeds_bound(v in small_vec(), beta in 0.1f64..100.0) {
        let (gap, bound) = hardmax_gap_bound(&v, beta);
        prop_assert!(gap <= bound + 1e-12, "gap {gap} > bound {bound}");
    }

    #[test]
    fn hardmax_gap_nonincreasing_in_beta(v in small_vec(), b_lo in 0.5f64..20.0, mult in 1.1f64..5.0) {
        // Monotonicity is claimed for a unique argmax; skip near-ties.
        let mut sorted = v.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(sorted[0] - sorted[1] > 1e-3);
        let (gap_lo, _) = hardmax_gap_bound(&v, b_lo);
        let (gap_hi, _) = hardmax_gap_bound(&v, b_lo * mult);
        prop_assert!(gap_hi <= gap_lo + 1e-12, "gap grew with beta: {gap_lo} -> {gap_hi}");
    }

    #[test]
    fn perm_loss_zero_on_relabelled_truth(
        k in 2usize..5,
        n in 5usize..30,
        seed in 0u64..1000,
        shift in 0usize..5,
    ) {
        let z: Vec<usize> = (0..n).map(|i| (i.wrapping_mul(7).wrapping_add(seed as usize)) % k).collect();
        // Relabel by a cyclic permutation: the loss must still be zero.
        let zp: Vec<usize> = z.iter().map(|&c| (c + shift) % k).collect();
        let a = one_hot(&zp, k);
        prop_assert!(perm_loss(&a, &z, k).abs() < 1e-12);
    }

    #[test]
    fn one_hot_extract_round_trip(k in 2usize..6, n in 1usize..40, seed in 0u64..1000) {
        let z: Vec<usize> = (0..n).map(|i| (i * 13 + seed as usize) % k).collect();
        let a = one_hot(&z, k);
        prop_assert_eq!(extract_assignments(&a), z);
    }

    #[test]
    fn lloyd_objective_monotone(seed in 0u64..300, k in 2usize..4, tau in 1usize..5) {
        let inst = generate_instance(k, 3, 15, 2.0, 1.0, 0.2, seed).unwrap();
        let init = kmeanspp(&inst.x, k, seed).unwrap();
        let run = lloyd(&inst.x, &init, tau).unwrap();
        for w in run.objectives.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "objective increased: {} -> {}", w[0], w[1]);
        }
    }
}

/// Scaling every coefficient by `c` scales the expansion output by exactly
/// `c` (bit-level linearity, since each term is multiplied by `c` once).
#[test]
fn feature_expansion_linear_in_coefficients() {
    let fit = fit_relu_features(Target::InvScalar, 1, 1.0, 10.0, 64, 7).expect("fit");
    let mut scaled = fit.clone();
    for atom in &mut scaled.atoms {
        atom.coeff *= 2.5;
    }
    for i in 0..50 {
        let v = [1.0 + 9.0 * i as f64 / 49.0];
        let base = fit.eval(&v);
        let s = scaled.eval(&v);
        assert!(
            (s - 2.5 * base).abs() <= 1e-12 * base.abs().max(1.0),
            "not linear at {v:?}: {s} vs {}",
            2.5 * base
        );
    }
}

/// A sharp softmax over negated squared distances picks the nearest centroid:
/// the assignment layers' correctness hinges on exactly this margin argument.
#[test]
fn sharp_softmax_argmax_matches_nearest() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let k = rng.gen_range(2..=5);
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let margin = sorted[0] - sorted[1];
        if margin < 1e-3 {
            continue;
        }
        // beta large enough that softmax mass concentrates: beta*margin >= ln(k/0.01)
        let beta = (k as f64 / 0.01).ln() / margin;
        let m = Mat::from_fn(k, 1, |i, _| scores[i]);
        let s = softmax_cols(&Mat::from_fn(k, 1, |i, j| beta * m.get(i, j)));
        let arg = extract_assignments(&s)[0];
        let want = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(arg, want);
        assert!(s.get(want, 0) > 0.99);
    }
}
