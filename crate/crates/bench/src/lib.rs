//! Shared fixtures for the criterion benchmarks in `benches/`.

use histaid_core::data::{prepare_input, synth_cohort, InputOptions, SyntheticCohort};
use histaid_core::experiment::{build_cohort, Cohort, CohortOptions};
use histaid_core::{EncoderConfig, Example, FusionConfig, FusionMethod, HistAid, ModelConfig, SyntheticSpec};

pub const DIM: usize = 32;

pub fn spec(n_subjects: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_subjects,
        visits_min: 4,
        visits_max: 16,
        dim: DIM,
        ..SyntheticSpec::default()
    }
}

pub fn cohort(n_subjects: usize) -> (SyntheticCohort, Cohort) {
    let spec = spec(n_subjects);
    let synth = synth_cohort(&spec, 0).expect("synth");
    let cohort = build_cohort(&synth.images, &synth.reports, &spec.labels, &CohortOptions::default()).expect("cohort");
    (synth, cohort)
}

/// A desk-sized model and its inputs with `k_text` history slots.
pub fn model(method: FusionMethod, k_text: usize) -> HistAid {
    let cfg = ModelConfig {
        store_dim: DIM,
        k_text,
        encoder: EncoderConfig {
            model_dim: 32,
            heads: 2,
            layers: 1,
            ff_dim: 64,
            ..EncoderConfig::default()
        },
        fusion: FusionConfig {
            method,
            ..FusionConfig::default()
        },
        ..ModelConfig::default()
    };
    HistAid::new(cfg, 0).expect("model")
}

pub fn examples(synth: &SyntheticCohort, cohort: &Cohort, k_text: usize, n: usize) -> Vec<Example> {
    let opts = InputOptions {
        k_text,
        ..InputOptions::default()
    };
    cohort
        .samples
        .iter()
        .filter(|s| !s.history_reports.is_empty())
        .take(n)
        .map(|s| Example {
            input: prepare_input(s, &synth.store, &opts).expect("input"),
            targets: s.labels.clone(),
        })
        .collect()
}
