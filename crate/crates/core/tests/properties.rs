use histaid_core::data::{check_leakage, synth_cohort, Split};
use histaid_core::experiment::{build_cohort, CohortOptions};
use histaid_core::metrics::{auroc, midranks, wilcoxon_one_tailed, Alternative, MeanStd};
use histaid_core::train::CheckpointMeta;
use histaid_core::{
    normalize_offsets, Checkpoint, EmbeddingStore, Modality, ModelConfig, SignalMode, SyntheticSpec, Tensor,
};
use proptest::prelude::*;

/// Scores on a coarse grid so ties show up often, plus labels with both classes.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((-8i32..8).prop_map(|k| k as f64 * 0.25), n),
            prop::collection::vec(prop::bool::ANY, n),
        )
            .prop_filter_map("both classes", |(s, l)| {
                let both = l.iter().any(|&b| b) && l.iter().any(|&b| !b);
                both.then(|| (s, l.into_iter().map(|b| b as u8 as f64).collect()))
            })
    })
}

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-20i32..20).prop_map(|k| k as f64 * 0.5), 1..8)
}

proptest! {
    #[test]
    fn auroc_in_unit_interval_and_flips_with_labels((s, l) in scored_labels()) {
        let a = auroc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<f64> = l.iter().map(|x| 1.0 - x).collect();
        prop_assert!((auroc(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let negated: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&negated, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_strictly_monotone_transforms((s, l) in scored_labels()) {
        let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn midranks_sum_to_triangle(v in prop::collection::vec((-5i32..5).prop_map(f64::from), 1..50)) {
        let n = v.len() as f64;
        prop_assert_eq!(midranks(&v).iter().sum::<f64>(), n * (n + 1.0) / 2.0);
    }

    #[test]
    fn wilcoxon_tails_are_probabilities_covering_everything(x in samples(), y in samples()) {
        let g = wilcoxon_one_tailed(&x, &y, Alternative::Greater).unwrap();
        let l = wilcoxon_one_tailed(&x, &y, Alternative::Less).unwrap();
        prop_assert!((0.0..=1.0).contains(&g) && (0.0..=1.0).contains(&l));
        prop_assert!(g + l >= 1.0 - 1e-12, "greater {} less {}", g, l);
        let swapped = wilcoxon_one_tailed(&y, &x, Alternative::Less).unwrap();
        prop_assert!((g - swapped).abs() < 1e-12);
    }

    #[test]
    fn mean_std_is_order_free(v in prop::collection::vec(-1e3f64..1e3, 1..20), seed in any::<u64>()) {
        let mut shuffled = v.clone();
        let k = (seed as usize) % v.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(MeanStd::of(&v), MeanStd::of(&shuffled));
    }

    #[test]
    fn normalized_offsets_span_unit_interval(v in prop::collection::vec(0.0f64..1e5, 1..16)) {
        let t = normalize_offsets(&v).unwrap();
        prop_assert!(t.iter().all(|x| (0.0..=1.0).contains(x)));
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            prop_assert!(t.contains(&0.0) && t.contains(&1.0));
        }
    }

    #[test]
    fn store_round_trips(
        dim in 1u32..6,
        rows in prop::collection::vec((prop::bool::ANY, prop::collection::vec(-1e3f32..1e3, 6)), 0..10),
    ) {
        let mut store = EmbeddingStore::new(dim).unwrap();
        for (i, (img, v)) in rows.into_iter().enumerate() {
            let modality = if img { Modality::Image } else { Modality::Text };
            store.insert(format!("k{i}"), modality, v[..dim as usize].to_vec()).unwrap();
        }
        prop_assert_eq!(EmbeddingStore::from_bytes(&store.to_bytes()).unwrap(), store);
    }

    #[test]
    fn checkpoint_round_trips(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 1..5),
        fill in -1e6f64..1e6,
        epoch in 1usize..100,
    ) {
        let params = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n = shape.iter().product::<usize>();
                let data = (0..n).map(|j| fill / (j as f64 + 1.0)).collect();
                (format!("p{i}"), Tensor::new(shape, data).unwrap())
            })
            .collect();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                epoch,
                val_auroc: Some(fill.abs() / 1e6),
                labels: vec!["A".into()],
                model: ModelConfig::default(),
                extra: serde_json::json!({ "k": epoch }),
            },
            params,
        };
        prop_assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_cohorts_never_leak_and_split_by_patient(
        seed in any::<u64>(),
        split_seed in any::<u64>(),
        mode in prop::sample::select(vec![
            SignalMode::CurrentImageOnly,
            SignalMode::HistoryTextRecent,
            SignalMode::HistoryTextStale,
            SignalMode::CrossModalXor,
            SignalMode::HistoryTextTrend,
        ]),
        min_history in 0usize..3,
    ) {
        let spec = SyntheticSpec {
            n_subjects: 30,
            dim: 4,
            labels: vec!["A".into(), "B".into()],
            signal: mode,
            ..SyntheticSpec::default()
        };
        let c = synth_cohort(&spec, seed).unwrap();
        let opts = CohortOptions { min_history, split_seed, ..CohortOptions::default() };
        let cohort = build_cohort(&c.images, &c.reports, &spec.labels, &opts).unwrap();
        check_leakage(&cohort.samples).unwrap();
        for s in &cohort.samples {
            prop_assert!(s.history_reports.iter().all(|r| r.offset_hours > 0.0));
            prop_assert!(s.history_images.iter().all(|r| r.offset_hours > 0.0));
            prop_assert!(s.history_reports.len() >= min_history);
            prop_assert!(s.image_key.as_deref().is_none_or(|k| c.store.contains(k)));
            prop_assert!(s.history_reports.iter().all(|r| c.store.contains(&r.text_key)));
            prop_assert_eq!(s.split, cohort.split.of(&s.subject_id));
        }
        let of = |split: Split| {
            let mut v: Vec<&str> = cohort.of_split(split).map(|s| s.subject_id.as_str()).collect();
            v.sort();
            v.dedup();
            v
        };
        let (tr, va, te) = (of(Split::Train), of(Split::Val), of(Split::Test));
        prop_assert!(tr.iter().all(|s| !va.contains(s) && !te.contains(s)));
        prop_assert!(va.iter().all(|s| !te.contains(s)));
    }
}
