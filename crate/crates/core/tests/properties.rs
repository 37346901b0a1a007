//! Randomized invariants across the public API.

use ndarray::Array2;
use proptest::prelude::*;

use trajopt::dataset::{dataset_from_str, dataset_to_string, generate_offline, normalize_values};
use trajopt::model::{init_model, read_checkpoint, write_checkpoint, HeadKind, ModelConfig, ModelState};
use trajopt::sortsample::{
    allocate_counts, augment_rb, build_traj_dataset, partition_bins, traj_dataset_from_str, traj_dataset_to_string,
    SortSampleParams, Strategy,
};
use trajopt::theory::premise_bound;
use trajopt::{OfflineDataset, TaskSpec};

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![
        Just(Strategy::Random),
        Just(Strategy::RandomSorted),
        Just(Strategy::ReweightPartial),
        Just(Strategy::ReweightSorted),
    ]
}

fn branin_with(values: Vec<f64>) -> OfflineDataset {
    let n = values.len();
    let pts = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { -5.0 + (i % 15) as f64 } else { (i % 16) as f64 * 0.9 });
    OfflineDataset::new(TaskSpec::branin(), pts, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_sum_to_length(scores in prop::collection::vec(0.0f64..5.0, 1..40), t in 1usize..300) {
        prop_assume!(scores.iter().sum::<f64>() > 0.0);
        let c = allocate_counts(&scores, t).unwrap();
        prop_assert_eq!(c.len(), scores.len());
        prop_assert_eq!(c.iter().sum::<usize>(), t);
        for (i, (&n, &s)) in c.iter().zip(&scores).enumerate().skip(1) {
            prop_assert_eq!(n, (t as f64 * s / scores.iter().sum::<f64>()).floor() as usize, "bin {}", i);
        }
    }

    #[test]
    fn budgets_telescope(values in prop::collection::vec(-50.0f64..0.0, 1..80), gap in 0.0f64..10.0) {
        let f_star = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + gap;
        let r = augment_rb(&values, f_star).unwrap();
        for t in 0..values.len() {
            let next = r.get(t + 1).copied().unwrap_or(0.0);
            let step = f_star - values[t];
            prop_assert!((r[t] - next - step).abs() <= 1e-9 * r[0].abs().max(1.0));
            prop_assert!(r[t] >= -1e-12);
        }
    }

    #[test]
    fn built_trajectories_keep_invariants(
        values in prop::collection::vec(-300.0f64..-1.0, 20..200),
        n_bins in 1usize..12,
        length in 1usize..40,
        strat in strategy(),
        seed in any::<u64>(),
    ) {
        let ds = branin_with(values);
        let params = SortSampleParams { k: 3.0, tau: 10.0, n_bins, length, strategy: strat, seed };
        let td = build_traj_dataset(&ds, 3, &params, ds.f_star()).unwrap();
        for tr in &td.trajectories {
            prop_assert_eq!(tr.len(), length);
            for t in 0..length {
                let next = tr.budgets.get(t + 1).copied().unwrap_or(0.0);
                prop_assert!((tr.budgets[t] - next - (ds.f_star() - tr.values[t])).abs() <= 1e-9 * tr.budgets[0].max(1.0));
            }
            if matches!(strat, Strategy::RandomSorted | Strategy::ReweightSorted) {
                prop_assert!(tr.values.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(tr.budgets.windows(2).all(|w| w[0] >= w[1]));
            }
        }
        let text = traj_dataset_to_string(&td);
        prop_assert_eq!(traj_dataset_to_string(&traj_dataset_from_str(&text).unwrap()), text);
    }

    #[test]
    fn partition_covers_every_point(values in prop::collection::vec(-1e3f64..1e3, 1..300), n_bins in 1usize..64) {
        let p = partition_bins(&values, n_bins).unwrap();
        prop_assert_eq!(p.sizes().iter().sum::<usize>(), values.len());
        for (b, members) in p.members().iter().enumerate() {
            for &i in members {
                prop_assert_eq!(p.bin_of(values[i]), b);
            }
        }
    }

    #[test]
    fn dataset_text_round_trip_is_bit_exact(n in 10usize..200, cut in 0.0f64..0.5, seed in any::<u64>(), norm in any::<bool>()) {
        let mut ds = generate_offline(&TaskSpec::sixhump_neg(), n, cut, seed).unwrap();
        if norm {
            ds = normalize_values(&ds, -200.0, 1.0316).unwrap();
        }
        let back = dataset_from_str(&dataset_to_string(&ds)).unwrap();
        prop_assert_eq!(back.values().len(), ds.values().len());
        for (a, b) in back.values().iter().zip(ds.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in back.points().iter().zip(ds.points()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn discrete_dataset_round_trip(seed in any::<u64>()) {
        let ds = generate_offline(&TaskSpec::hidden_pattern(8, 4).unwrap(), 64, 0.2, seed).unwrap();
        prop_assert_eq!(dataset_from_str(&dataset_to_string(&ds)).unwrap(), ds);
    }

    #[test]
    fn premise_bound_is_affine(fb in -5.0f64..5.0, lo in -10.0f64..0.0, span in 0.1f64..10.0, eps in 0.01f64..0.99, w in 0.1f64..5.0) {
        let hi = lo + span;
        let b = premise_bound(fb, lo, hi, eps, w).unwrap();
        prop_assert!((b - 2.0 * (eps * span + lo - fb) / w).abs() < 1e-9);
        let at_threshold = premise_bound(lo + eps * span, lo, hi, eps, w).unwrap();
        prop_assert!(at_threshold.abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut cfg = ModelConfig::new(HeadKind::Discrete { dim: 3, vocab: 4 }, 2, 2, 4, 9);
    cfg.embed_dim = 8;
    let m: ModelState<f32> = init_model(cfg, 5).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&m, &mut buf).unwrap();
    let back = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back, m);
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(again, buf);
}
