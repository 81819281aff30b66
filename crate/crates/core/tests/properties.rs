use std::collections::BTreeSet;

use evil_core::data::{
    apply_augment, partition_patients, split_labeled, AugmentParams, Dataset, EpochSampler, LabeledAmount, Sample,
    SplitSpec,
};
use evil_core::eval::{asd, dsc, hd95, percentile, squared_distance_transform, EmptyMaskPolicy};
use evil_core::evidential::{belief_and_uncertainty, default_tau, evidence_from_logits, Logits};
use evil_core::loss::{beta_schedule, lambda_rampup, poly_lr, UncertaintyMask};
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;

fn mask(max: usize) -> impl Strategy<Value = Array2<bool>> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<bool>(), h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    })
}

fn mask_pair(max: usize) -> impl Strategy<Value = (Array2<bool>, Array2<bool>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        let cell = proptest::collection::vec(any::<bool>(), h * w);
        (cell.clone(), cell).prop_map(move |(a, b)| {
            (Array2::from_shape_vec((h, w), a).unwrap(), Array2::from_shape_vec((h, w), b).unwrap())
        })
    })
}

fn logits(k: usize) -> impl Strategy<Value = Array4<f64>> {
    proptest::collection::vec(-30.0f64..30.0, k * 6)
        .prop_map(move |v| Array4::from_shape_vec((1, k, 2, 3), v).unwrap())
}

proptest! {
    #[test]
    fn evidence_stays_in_its_bounds(z in logits(4)) {
        let tau = default_tau(4);
        let e = evidence_from_logits(&Logits::new(z).unwrap(), tau).unwrap();
        let (lo, hi) = ((-1.0 / tau).exp(), (1.0 / tau).exp());
        for &v in e.values() {
            prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12));
        }
    }

    #[test]
    fn evidence_is_monotone(a in -20.0f64..20.0, d in 0.0f64..5.0) {
        let z = Array4::from_shape_vec((1, 2, 1, 1), vec![a, a + d]).unwrap();
        let e = evidence_from_logits(&Logits::new(z).unwrap(), default_tau(2)).unwrap();
        prop_assert!(e.values()[[0, 1, 0, 0]] >= e.values()[[0, 0, 0, 0]]);
    }

    #[test]
    fn opinions_lie_on_the_simplex(z in logits(3)) {
        let e = evidence_from_logits(&Logits::new(z).unwrap(), default_tau(3)).unwrap();
        let p = belief_and_uncertainty(&e).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                let u = p.uncertainty[[0, 0, y, x]];
                let total: f64 = (0..3).map(|k| p.belief[[0, k, y, x]]).sum::<f64>() + u;
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(u > 0.0 && u <= 1.0);
                prop_assert!((0..3).all(|k| p.belief[[0, k, y, x]] >= 0.0));
            }
        }
    }

    #[test]
    fn mask_fraction_grows_with_threshold(u in proptest::collection::vec(0.0f64..1.0, 16), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let u = Array4::from_shape_vec((1, 1, 4, 4), u).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = UncertaintyMask::from_uncertainty(&u, lo);
        let b = UncertaintyMask::from_uncertainty(&u, hi);
        prop_assert!(a.fraction() <= b.fraction());
        prop_assert!(a.values().iter().zip(b.values()).all(|(&x, &y)| !x || y));
    }

    #[test]
    fn schedules_are_monotone(t_max in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
        let (a, b) = (a.min(t_max), b.min(t_max));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let beta = |t| beta_schedule(t, t_max).unwrap();
        let lam = |t| lambda_rampup(t, t_max, 0.1).unwrap();
        let lr = |t| poly_lr(t, t_max, 0.01).unwrap();
        prop_assert!(beta(lo) <= beta(hi) && beta(hi) <= 1.0);
        prop_assert!(lam(lo) <= lam(hi) && lam(hi) <= 0.1);
        prop_assert!(lr(lo) >= lr(hi) && lr(hi) >= 0.0);
    }

    #[test]
    fn dsc_is_symmetric_and_bounded((a, b) in mask_pair(12)) {
        let ab = dsc(a.view(), b.view()).unwrap();
        prop_assert_eq!(ab, dsc(b.view(), a.view()).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dsc(a.view(), a.view()).unwrap(), 1.0);
    }

    #[test]
    fn surface_metrics_are_symmetric((a, b) in mask_pair(12)) {
        for policy in [EmptyMaskPolicy::Skip, EmptyMaskPolicy::Diagonal] {
            prop_assert_eq!(hd95(a.view(), b.view(), policy).unwrap(), hd95(b.view(), a.view(), policy).unwrap());
            prop_assert_eq!(asd(a.view(), b.view(), policy).unwrap(), asd(b.view(), a.view(), policy).unwrap());
        }
        if a.iter().any(|&v| v) {
            prop_assert_eq!(hd95(a.view(), a.view(), EmptyMaskPolicy::Skip).unwrap(), Some(0.0));
        }
    }

    #[test]
    fn distance_transform_matches_brute_force(m in mask(14)) {
        let d = squared_distance_transform(m.view());
        let seeds: Vec<(usize, usize)> = m.indexed_iter().filter(|(_, &v)| v).map(|(p, _)| p).collect();
        for ((y, x), &got) in d.indexed_iter() {
            let want = seeds
                .iter()
                .map(|&(sy, sx)| (sy as f64 - y as f64).powi(2) + (sx as f64 - x as f64).powi(2))
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn percentile_is_monotone(v in proptest::collection::vec(-100.0f64..100.0, 1..50), q1 in 0.0f64..100.0, q2 in 0.0f64..100.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let (a, b) = (percentile(&v, lo), percentile(&v, hi));
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a <= b && min <= a && b <= max);
    }

    #[test]
    fn labeled_split_is_a_partition(n in 3usize..40, ratio in 0.05f64..1.0, seed in any::<u64>()) {
        let ds = Dataset {
            samples: (0..n)
                .map(|p| Sample {
                    image: Array3::zeros((1, 2, 2)),
                    label: Some(Array2::zeros((2, 2))),
                    patient_id: format!("p{p:03}"),
                    slice_index: 0,
                })
                .collect(),
            num_classes: 4,
        };
        let (lab, unl) = split_labeled(&ds, &SplitSpec { labeled: LabeledAmount::Ratio(ratio), seed }).unwrap();
        let l: BTreeSet<String> = lab.patients().into_iter().collect();
        let u: BTreeSet<String> = unl.patients().into_iter().collect();
        prop_assert!(l.is_disjoint(&u));
        prop_assert_eq!(l.len() + u.len(), n);
        prop_assert!(unl.samples.iter().all(|s| s.label.is_none()));
        let part = partition_patients(&ds.patients(), seed).unwrap();
        let all: BTreeSet<&String> = part.train.iter().chain(&part.val).chain(&part.test).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(part.train.len() + part.val.len() + part.test.len(), n);
    }

    #[test]
    fn quarter_turns_and_flips_keep_histograms(
        labels in proptest::collection::vec(0u8..4, 64),
        turns in 0u8..4,
        flip in any::<bool>(),
    ) {
        let label = Array2::from_shape_vec((8, 8), labels).unwrap();
        let s = Sample {
            image: label.mapv(|v| v as f32 / 3.0).insert_axis(ndarray::Axis(0)),
            label: Some(label.clone()),
            patient_id: "p".into(),
            slice_index: 0,
        };
        let p = AugmentParams { quarter_turns: turns, flip_horizontal: flip, ..AugmentParams::identity() };
        let out = apply_augment(&s, &p);
        let hist = |a: &Array2<u8>| (0..4u8).map(|k| a.iter().filter(|&&v| v == k).count()).collect::<Vec<_>>();
        let new_label = out.label.unwrap();
        prop_assert_eq!(hist(&new_label), hist(&label));
        // image and label move together
        prop_assert!(out.image.iter().zip(new_label.iter()).all(|(&i, &l)| i == l as f32 / 3.0));
    }

    #[test]
    fn each_epoch_is_a_permutation(len in 1usize..60, seed in any::<u64>(), stream in 0u64..2, epoch in 0u64..5) {
        let s = EpochSampler { len, seed, stream };
        let mut p = s.permutation(epoch);
        let window = s.take(epoch * len as u64, len);
        prop_assert_eq!(&window, &p);
        p.sort();
        prop_assert_eq!(p, (0..len).collect::<Vec<_>>());
    }
}
