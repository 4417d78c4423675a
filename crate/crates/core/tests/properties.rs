use proptest::prelude::*;

use involute::arch::{BuildOptions, ModelKind, SymmetricModel};
use involute::cnn::{invariant_conv_forward, ConvSpec, FlipAxis, Image, Map};
use involute::linalg::{lu_inverse, random_involutory, Matrix};
use involute::metrics::{parse_csv, records_to_csv, RunRecord};
use involute::nn::{Activation, TrainConfig};
use involute::symmetry::{BlockInvarianceSpec, InvolutorySpec, Parity, PartitionLabel};

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..=1.0f64, h * w).prop_map(move |px| Image::new(h, w, px).unwrap())
}

fn sized_image() -> impl Strategy<Value = Image> {
    (3usize..9, 3usize..9).prop_flat_map(|(h, w)| image(h, w))
}

fn parity() -> impl Strategy<Value = Parity> {
    prop_oneof![Just(Parity::Even), Just(Parity::Odd)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn double_flip_is_identity(img in sized_image(), vertical in any::<bool>()) {
        let axis = if vertical { FlipAxis::Vertical } else { FlipAxis::Horizontal };
        prop_assert_eq!(img.flip(axis).flip(axis), img);
    }

    #[test]
    fn invariant_conv_maps_ignore_the_flip(img in sized_image(), seed in any::<u64>(), vertical in any::<bool>()) {
        let flip_axis = if vertical { FlipAxis::Vertical } else { FlipAxis::Horizontal };
        let spec = ConvSpec { kernel_size: 3, num_filters: 2, invariant: true, flip_axis };
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let filters: Vec<Map> = (0..2).map(|_| Map { rows: 3, cols: 3, data: (0..9).map(|_| next()).collect() }).collect();
        let biases = vec![next(), next()];
        let a = invariant_conv_forward(&img, &spec, &filters, &biases, Activation::Tanh).unwrap();
        let b = invariant_conv_forward(&img.flip(flip_axis), &spec, &filters, &biases, Activation::Tanh).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn classification_swaps_under_the_map(n in 1usize..7, g in 1usize..7, seed in any::<u64>(),
                                          v in prop::collection::vec(-3.0..3.0f64, 6)) {
        let gamma = g.min(n);
        let a = random_involutory(n, gamma, seed).unwrap();
        let spec = InvolutorySpec::new(a.clone(), Parity::Even).unwrap();
        let x = &v[..n];
        let l = spec.classify(x).unwrap();
        let l2 = spec.classify(&a.matvec(x).unwrap()).unwrap();
        prop_assert_eq!(l2, l.swapped());
        let rp = spec.reparam_point(x).unwrap();
        prop_assert!(spec.classify(&rp.point).unwrap().in_pid());
        prop_assert_eq!(rp.flipped[0], l == PartitionLabel::SMinus);
    }

    #[test]
    fn iptn_respects_a_general_involution(seed in 0u64..1000, p in parity(),
                                          x in prop::collection::vec(-2.0..2.0f64, 3)) {
        let a = random_involutory(3, 1 + (seed % 3) as usize, seed).unwrap();
        let spec = InvolutorySpec::new(a.clone(), p).unwrap();
        let cfg = TrainConfig { hidden: vec![5], activation: Activation::Tanh, seed, ..TrainConfig::default() };
        let m = SymmetricModel::build(ModelKind::Iptn, 3, Some(spec.into()), &cfg, BuildOptions::default()).unwrap();
        let fx = m.evaluate_quiet(&x).unwrap();
        let fax = m.evaluate_quiet(&a.matvec(&x).unwrap()).unwrap();
        // A·A·x only approximates x for a non-signed-permutation A.
        prop_assert!((fax - p.sign() * fx).abs() <= 1e-9 * (1.0 + fx.abs()));
    }

    #[test]
    fn hub_multi_is_exact_for_sign_blocks(seed in 0u64..1000, ps in prop::collection::vec(parity(), 3),
                                          x in prop::collection::vec(-2.0..2.0f64, 3), flip in 0usize..8) {
        let dims: Vec<(usize, Parity)> = ps.iter().enumerate().map(|(i, &p)| (i, p)).collect();
        let blocks = BlockInvarianceSpec::sign_flips(3, &dims).unwrap();
        let cfg = TrainConfig { hidden: vec![4, 3], seed, ..TrainConfig::default() };
        let m = SymmetricModel::build(ModelKind::HubMulti, 3, Some(blocks.into()), &cfg, BuildOptions::default()).unwrap();
        let mut y = x.clone();
        let mut sign = 1.0;
        for i in 0..3 {
            if flip >> i & 1 == 1 {
                y[i] = -y[i];
                sign *= ps[i].sign();
            }
        }
        prop_assert_eq!(m.evaluate_quiet(&y).unwrap(), sign * m.evaluate_quiet(&x).unwrap());
    }

    #[test]
    fn lu_inverse_inverts(seed in any::<u64>(), n in 1usize..6) {
        let a = random_involutory(n, n.div_ceil(2), seed).unwrap();
        let inv = lu_inverse(&a).unwrap();
        // An involution is its own inverse.
        prop_assert!(inv.max_abs_diff(&a).unwrap() < 1e-9);
        let prod = a.matmul(&inv).unwrap();
        prop_assert!(prod.max_abs_diff(&Matrix::identity(n)).unwrap() < 1e-9);
    }

    #[test]
    fn matrix_text_round_trips(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed ^ i as u64) as f64).sin() * 1e3).collect();
        let m = Matrix::new(rows, cols, data).unwrap();
        prop_assert_eq!(Matrix::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn run_log_round_trips(recs in prop::collection::vec((0usize..10_000, any::<f64>(), any::<f64>(), any::<u64>(), 0.0..1e6f64), 0..20)) {
        let records: Vec<RunRecord> = recs.iter().map(|&(epoch, train_loss, violation, trunk_evals, wall_ms)| RunRecord {
            epoch, train_loss, violation, trunk_evals, wall_ms,
        }).collect();
        let back = parse_csv(&records_to_csv(&records)).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a.epoch, b.epoch);
            prop_assert!(a.train_loss.to_bits() == b.train_loss.to_bits() || (a.train_loss.is_nan() && b.train_loss.is_nan()));
            prop_assert!(a.violation.to_bits() == b.violation.to_bits() || (a.violation.is_nan() && b.violation.is_nan()));
            prop_assert_eq!(a.trunk_evals, b.trunk_evals);
            prop_assert_eq!(a.wall_ms.to_bits(), b.wall_ms.to_bits());
        }
    }
}
