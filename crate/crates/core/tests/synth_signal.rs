//! The generator plants the structure each signal mode promises. Checked
//! with a class-mean-difference linear probe fit on train subjects and
//! scored on the rest, independent of the model.

use histaid_core::data::{synth_cohort, Split, TemporalSample};
use histaid_core::experiment::{build_cohort, Cohort, CohortOptions};
use histaid_core::metrics::auroc;
use histaid_core::{EmbeddingStore, SignalMode, SyntheticSpec};

fn cohort(spec: &SyntheticSpec) -> (Cohort, EmbeddingStore) {
    let c = synth_cohort(spec, 7).unwrap();
    let cohort = build_cohort(&c.images, &c.reports, &spec.labels, &CohortOptions::default()).unwrap();
    (cohort, c.store)
}

fn spec(signal: SignalMode) -> SyntheticSpec {
    SyntheticSpec {
        n_subjects: 400,
        dim: 16,
        labels: vec!["A".into(), "B".into(), "C".into()],
        signal,
        ..SyntheticSpec::default()
    }
}

/// Macro AUROC of a mean-difference probe on whatever vector `pick` returns.
fn probe<F>(cohort: &Cohort, store: &EmbeddingStore, pick: F) -> f64
where
    F: Fn(&TemporalSample) -> Option<String>,
{
    probe_across(cohort, store, &pick, &pick)
}

/// Fit the probe on `fit` vectors of train samples, score `score` vectors of the rest.
fn probe_across<F, G>(cohort: &Cohort, store: &EmbeddingStore, fit: F, score: G) -> f64
where
    F: Fn(&TemporalSample) -> Option<String>,
    G: Fn(&TemporalSample) -> Option<String>,
{
    let rows = |pick: &dyn Fn(&TemporalSample) -> Option<String>, train: bool| -> Vec<(Vec<f64>, &TemporalSample)> {
        cohort
            .samples
            .iter()
            .filter(|s| (s.split == Some(Split::Train)) == train)
            .filter_map(|s| pick(s).map(|k| (store.vector(&k).unwrap(), s)))
            .collect()
    };
    let (train, held_out) = (rows(&fit, true), rows(&score, false));
    let dim = store.dim();
    let n_labels = cohort.labels.len();
    let mut total = 0.0;
    for l in 0..n_labels {
        let (mut pos, mut neg) = (vec![0.0; dim], vec![0.0; dim]);
        let (mut np, mut nn) = (0.0, 0.0);
        for (x, s) in &train {
            let (acc, n) = if s.labels[l] == 1.0 { (&mut pos, &mut np) } else { (&mut neg, &mut nn) };
            acc.iter_mut().zip(x).for_each(|(a, v)| *a += v);
            *n += 1.0;
        }
        let dir: Vec<f64> = pos.iter().zip(&neg).map(|(p, q)| p / np - q / nn).collect();
        let (scores, targets): (Vec<f64>, Vec<f64>) = held_out
            .iter()
            .map(|(x, s)| (x.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>(), s.labels[l]))
            .unzip();
        total += auroc(&scores, &targets).unwrap();
    }
    total / n_labels as f64
}

fn image(s: &TemporalSample) -> Option<String> {
    s.image_key.clone()
}

/// Most recent earlier report.
fn last_report(s: &TemporalSample) -> Option<String> {
    s.history_reports
        .iter()
        .min_by(|a, b| a.offset_hours.total_cmp(&b.offset_hours))
        .map(|r| r.text_key.clone())
}

fn last_report_within(s: &TemporalSample, lo_days: f64, hi_days: f64) -> Option<String> {
    let r = s
        .history_reports
        .iter()
        .min_by(|a, b| a.offset_hours.total_cmp(&b.offset_hours))?;
    let days = r.offset_hours / 24.0;
    (days >= lo_days && days < hi_days).then(|| r.text_key.clone())
}

#[test]
fn current_image_only_lives_in_the_scan() {
    let (c, store) = cohort(&SyntheticSpec {
        image_amplitude: 1.5,
        ..spec(SignalMode::CurrentImageOnly)
    });
    let img = probe(&c, &store, image);
    let txt = probe(&c, &store, last_report);
    assert!(img > 0.9, "image probe {img}");
    assert!((txt - 0.5).abs() < 0.06, "report probe {txt}");
}

#[test]
fn recent_history_carries_the_label_while_it_persists() {
    let persistent = SyntheticSpec {
        recency_halflife_days: 3000.0,
        ..spec(SignalMode::HistoryTextRecent)
    };
    let (c, store) = cohort(&persistent);
    let kept = probe(&c, &store, last_report);
    assert!(kept > 0.85, "persistent state, report probe {kept}");

    let forgetful = SyntheticSpec {
        recency_halflife_days: 0.5,
        ..persistent
    };
    let (c, store) = cohort(&forgetful);
    let lost = probe(&c, &store, last_report);
    assert!((lost - 0.5).abs() < 0.06, "redrawn state, report probe {lost}");
}

#[test]
fn stale_reports_contradict_the_label() {
    let (c, store) = cohort(&spec(SignalMode::HistoryTextStale));
    let near = probe(&c, &store, |s| last_report_within(s, 0.0, 30.0));
    let near_fit = |s: &TemporalSample| last_report_within(s, 0.0, 30.0);
    let far = probe_across(&c, &store, near_fit, |s| last_report_within(s, 60.0, f64::INFINITY));
    assert!(near > 0.85, "report within 30 days: {near}");
    assert!(far < 0.35, "report across a long gap: {far}");
}

#[test]
fn xor_is_invisible_to_either_modality_alone() {
    let (c, store) = cohort(&SyntheticSpec {
        image_amplitude: 2.5,
        ..spec(SignalMode::CrossModalXor)
    });
    let img = probe(&c, &store, image);
    let txt = probe(&c, &store, last_report);
    assert!((img - 0.5).abs() < 0.06, "image probe {img}");
    assert!((txt - 0.5).abs() < 0.06, "report probe {txt}");
}

#[test]
fn trend_weights_recent_reports_more() {
    let (c, store) = cohort(&SyntheticSpec {
        visits_min: 4,
        visits_max: 8,
        trend_tau: 0.1,
        ..spec(SignalMode::HistoryTextTrend)
    });
    let recent = probe(&c, &store, last_report);
    let oldest = probe(&c, &store, |s| {
        s.history_reports
            .iter()
            .max_by(|a, b| a.offset_hours.total_cmp(&b.offset_hours))
            .filter(|_| s.history_reports.len() >= 3)
            .map(|r| r.text_key.clone())
    });
    assert!(recent > 0.7, "most recent report {recent}");
    assert!(oldest < recent - 0.1, "oldest {oldest} vs most recent {recent}");
}
