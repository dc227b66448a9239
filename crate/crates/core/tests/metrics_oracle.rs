mod common;

use common::*;
use popnet_core::grid::{BinaryMask, SoftMask};
use popnet_core::metrics::{mae, max_e_measure, max_f_measure, s_measure, MetricOptions, MetricValues};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

#[test]
fn fast_metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..100 {
        let pred = random_prediction(&mut rng, SIDE, SIDE, i);
        let gt = random_gt(&mut rng, SIDE, SIDE);
        let p = normalized(pred.data());
        let g = gt.data();
        assert_eq!(mae(&pred, &gt).unwrap(), oracle_mae(&p, g), "pair {i}");
        let f = max_f_measure(&pred, &gt).unwrap();
        assert!((f - oracle_max_f(&p, g)).abs() < 1e-9, "F pair {i}: {f}");
        let e = max_e_measure(&pred, &gt).unwrap();
        assert!((e - oracle_max_e(&p, g)).abs() < 1e-6, "E pair {i}: {e}");
        let s = s_measure(&pred, &gt).unwrap();
        assert!((s - oracle_s(&p, g, SIDE, SIDE)).abs() < 1e-6, "S pair {i}: {s}");
    }
}

#[test]
fn degenerate_ground_truth_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for full in [false, true] {
        let pred = random_prediction(&mut rng, SIDE, SIDE, 1);
        let gt = BinaryMask::from_fn(SIDE, SIDE, |_, _| full);
        let p = normalized(pred.data());
        let e = max_e_measure(&pred, &gt).unwrap();
        assert!((e - oracle_max_e(&p, gt.data())).abs() < 1e-12);
        let s = s_measure(&pred, &gt).unwrap();
        assert!((s - oracle_s(&p, gt.data(), SIDE, SIDE)).abs() < 1e-12);
    }
}

#[test]
fn odd_shapes_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w) in [(5, 9), (13, 4), (2, 2), (31, 17)] {
        for i in 0..5 {
            let pred = random_prediction(&mut rng, h, w, i);
            let gt = random_gt(&mut rng, h, w);
            let p = normalized(pred.data());
            let s = s_measure(&pred, &gt).unwrap();
            assert!((s - oracle_s(&p, gt.data(), h, w)).abs() < 1e-6, "{h}x{w}");
            let e = max_e_measure(&pred, &gt).unwrap();
            assert!((e - oracle_max_e(&p, gt.data())).abs() < 1e-6, "{h}x{w}");
        }
    }
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (
        proptest::collection::vec(0.0f64..=1.0, 64),
        proptest::collection::vec(any::<bool>(), 64),
    )
        .prop_filter("non-empty ground truth", |(_, g)| g.iter().any(|t| *t))
}

fn masks(p: &[f64], g: &[bool]) -> (SoftMask, BinaryMask) {
    (
        SoftMask::from_vec(8, 8, p.to_vec()).unwrap(),
        BinaryMask::from_fn(8, 8, |y, x| g[y * 8 + x]),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_stay_in_unit_interval((p, g) in pair()) {
        let (p, g) = masks(&p, &g);
        let v = MetricValues::compute(&p, &g, &MetricOptions::default()).unwrap();
        for x in [v.mae, v.max_f, v.s_measure, v.max_e] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn mae_is_symmetric_under_complement((p, g) in pair()) {
        let raw = MetricOptions { normalize: false };
        let (sp, sg) = masks(&p, &g);
        let inv: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        let (ip, ig) = (SoftMask::from_vec(8, 8, inv).unwrap(), sg.complement());
        let a = popnet_core::metrics::mae_with(&sp, &sg, &raw).unwrap();
        let b = popnet_core::metrics::mae_with(&ip, &ig, &raw).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn normalization_ignores_affine_rescaling((p, g) in pair(), scale in 0.1f64..0.9, shift in 0.0f64..0.1) {
        let (sp, sg) = masks(&p, &g);
        let q: Vec<f64> = p.iter().map(|v| v * scale + shift).collect();
        let sq = SoftMask::from_vec(8, 8, q).unwrap();
        let a = MetricValues::compute(&sp, &sg, &MetricOptions::default()).unwrap();
        let b = MetricValues::compute(&sq, &sg, &MetricOptions::default()).unwrap();
        prop_assert!((a.mae - b.mae).abs() < 1e-9);
        prop_assert!((a.s_measure - b.s_measure).abs() < 1e-9);
    }

    #[test]
    fn pixel_order_does_not_change_f_or_mae((p, g) in pair(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..64).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f64> = idx.iter().map(|i| p[*i]).collect();
        let gg: Vec<bool> = idx.iter().map(|i| g[*i]).collect();
        let (a, ag) = masks(&p, &g);
        let (b, bg) = masks(&pp, &gg);
        prop_assert!((max_f_measure(&a, &ag).unwrap() - max_f_measure(&b, &bg).unwrap()).abs() < 1e-12);
        prop_assert!((max_e_measure(&a, &ag).unwrap() - max_e_measure(&b, &bg).unwrap()).abs() < 1e-12);
        prop_assert!((mae(&a, &ag).unwrap() - mae(&b, &bg).unwrap()).abs() < 1e-12);
    }
}
