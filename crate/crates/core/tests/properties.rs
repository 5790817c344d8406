use latformer::attention::{masked_self_attention, masked_weights, softmax_rows};
use latformer::mask::{action_mask, compose_masks, mask_from_shift, mask_via_fourier, shift_vector};
use latformer::smoothing::{group_graph, heat_step};
use latformer::{AttentionMask, DenseMatrix, ExpertFamily, LatticeAction, LatticeShape};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |data| DenseMatrix::from_vec(rows, cols, data).unwrap())
}

fn square_side() -> impl Strategy<Value = usize> {
    2usize..=6
}

fn mask(action: &LatticeAction, shape: &LatticeShape) -> AttentionMask {
    action_mask(action, shape).unwrap()
}

fn power(m: &AttentionMask, k: usize) -> AttentionMask {
    let mut out = AttentionMask::identity(m.size());
    for _ in 0..k {
        out = compose_masks(&out, m).unwrap();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotations_form_a_cyclic_group(side in square_side(), a in 0u8..4, b in 0u8..4) {
        let shape = LatticeShape::grid(side, side).unwrap();
        let quarter = mask(&LatticeAction::rotate(1), &shape);
        let product = compose_masks(&power(&quarter, a.into()), &power(&quarter, b.into())).unwrap();
        prop_assert_eq!(product, power(&quarter, usize::from((a + b) % 4)));
        prop_assert_eq!(power(&quarter, 4), AttentionMask::identity(side * side));
    }

    #[test]
    fn reflections_are_involutions(h in 1usize..7, w in 1usize..7, axis in 0usize..3) {
        let shape = LatticeShape::grid(h, w).unwrap();
        let dims = match axis { 0 => vec![0], 1 => vec![1], _ => vec![0, 1] };
        let m = mask(&LatticeAction::flip(dims), &shape);
        prop_assert_eq!(power(&m, 2), AttentionMask::identity(h * w));
    }

    #[test]
    fn translations_add(h in 1usize..7, w in 1usize..7, a in (-9i64..9, -9i64..9), b in (-9i64..9, -9i64..9)) {
        let shape = LatticeShape::grid(h, w).unwrap();
        let ma = mask(&LatticeAction::translate([a.0, a.1]), &shape);
        let mb = mask(&LatticeAction::translate([b.0, b.1]), &shape);
        let sum = mask(&LatticeAction::translate([a.0 + b.0, a.1 + b.1]), &shape);
        prop_assert_eq!(compose_masks(&ma, &mb).unwrap(), sum.clone());
        prop_assert_eq!(compose_masks(&mb, &ma).unwrap(), sum);
    }

    #[test]
    fn shift_and_fourier_routes_agree(n in 1usize..=64, delta in -70i64..70, kind in 0usize..4, factor in 2usize..9) {
        let shape = LatticeShape::line(n).unwrap();
        let action = match kind {
            0 => LatticeAction::translate([delta]),
            1 => LatticeAction::flip([0]),
            2 => LatticeAction::scale_up([factor]),
            _ => LatticeAction::scale_down([factor]),
        };
        let shift = shift_vector(&action, &shape).unwrap();
        let direct = mask_from_shift(&shift, n).unwrap();
        prop_assert_eq!(&mask_via_fourier(&shift, n).unwrap(), &direct);
        prop_assert_eq!(direct, mask(&action, &shape));
    }

    #[test]
    fn scaling_the_mask_leaves_weights_unchanged(x in matrix(9, 3), scale in 0.01..1.0f64, mask_values in prop::collection::vec(0.05..1.0f64, 81)) {
        let m = DenseMatrix::from_vec(9, 9, mask_values).unwrap();
        let base = masked_weights(&x, &x, &AttentionMask::new(m.clone()).unwrap()).unwrap();
        let scaled = masked_weights(&x, &x, &AttentionMask::new(m.scale(scale)).unwrap()).unwrap();
        prop_assert!(base.max_abs_diff(&scaled) < 1e-12);
        for s in base.row_sums() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_commutes_with_column_permutations(m in matrix(5, 7), perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle()) {
        let permuted = DenseMatrix::from_fn(5, 7, |i, j| m.get(i, perm[j]));
        let a = softmax_rows(&m);
        let b = softmax_rows(&permuted);
        for i in 0..5 {
            for (j, &pj) in perm.iter().enumerate() {
                prop_assert!((b.get(i, j) - a.get(i, pj)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(x in matrix(8, 3), perm in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(), mask_values in prop::collection::vec(0.1..1.0f64, 64)) {
        let m = DenseMatrix::from_vec(8, 8, mask_values).unwrap();
        let out = masked_self_attention(&x, &AttentionMask::new(m.clone()).unwrap()).unwrap();
        let px = DenseMatrix::from_fn(8, 3, |i, c| x.get(perm[i], c));
        let pm = DenseMatrix::from_fn(8, 8, |i, j| m.get(perm[i], perm[j]));
        let permuted = masked_self_attention(&px, &AttentionMask::new(pm).unwrap()).unwrap();
        let expected = DenseMatrix::from_fn(8, 3, |i, c| out.get(perm[i], c));
        prop_assert!(permuted.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn diffusion_conserves_mass(side in square_side(), family in 0usize..4, lambda in 0.0..=1.0f64, raw in prop::collection::vec(0.0..1.0f64, 36)) {
        let family = [ExpertFamily::Translate, ExpertFamily::Rotate, ExpertFamily::Reflect, ExpertFamily::Scale][family];
        let shape = LatticeShape::grid(side, side).unwrap();
        let graph = group_graph(family, &shape).unwrap();
        let mut w: Vec<f64> = raw.iter().cycle().take(graph.len()).copied().collect();
        let total: f64 = w.iter().sum::<f64>().max(1e-9);
        w.iter_mut().for_each(|v| *v /= total);
        let mass: f64 = w.iter().sum();
        for _ in 0..10 {
            w = heat_step(&graph, &w, lambda);
            prop_assert!((w.iter().sum::<f64>() - mass).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }
    }
}
