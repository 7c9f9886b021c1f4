//! Cohort assembly, seeded runs and ablation grids shared by the command
//! line tool and the end-to-end checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{
    build_samples, check_leakage, dedup_filter, merge_records, prepare_input, split_patients, BuildStats,
    CohortSplit, Demographics, EmbeddingStore, FilterStats, ImageRow, InputOptions, MergeStats, ReportRow,
    SectionMode, Split, TemporalSample,
};
use crate::encoder::Pooling;
use crate::error::{Error, Result};
use crate::fusion::FusionMethod;
use crate::metrics::{evaluate, wilcoxon_one_tailed, Alternative, MeanStd, MetricReport};
use crate::model::{HistAid, ModelConfig};
use crate::temporal::PositionalMode;
use crate::train::{fit, predict_all, Checkpoint, CheckpointMeta, EpochLog, Example, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortOptions {
    pub section_mode: SectionMode,
    pub min_history: usize,
    pub split_fractions: (f64, f64, f64),
    pub split_seed: u64,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions {
            section_mode: SectionMode::Impression,
            min_history: 0,
            split_fractions: (0.8, 0.1, 0.1),
            split_seed: 0,
        }
    }
}

/// Filtered, split samples plus the counts of every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub labels: Vec<String>,
    pub samples: Vec<TemporalSample>,
    pub split: CohortSplit,
    pub merge: MergeStats,
    pub build: BuildStats,
    pub filter: FilterStats,
}

impl Cohort {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &TemporalSample> {
        self.samples.iter().filter(move |s| s.split == Some(split))
    }

    pub fn count(&self, split: Split) -> usize {
        self.of_split(split).count()
    }
}

/// Join, build, leakage-check, filter and split. A history item at or after
/// its anchor fails with [`Error::Leakage`].
pub fn build_cohort(
    images: &[ImageRow],
    reports: &[ReportRow],
    labels: &[String],
    opts: &CohortOptions,
) -> Result<Cohort> {
    let (records, merge) = merge_records(images, reports);
    if let Some(r) = records.iter().find(|r| r.labels.len() != labels.len()) {
        return Err(Error::contract(format!(
            "study {} has {} labels, expected {}",
            r.study_id,
            r.labels.len(),
            labels.len()
        )));
    }
    let (samples, build) = build_samples(&records, opts.min_history, opts.section_mode);
    check_leakage(&samples)?;
    let (mut samples, filter) = dedup_filter(samples, opts.section_mode);
    let mut subjects: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let split = split_patients(&subjects, opts.split_fractions, opts.split_seed)?;
    split.assign(&mut samples)?;
    Ok(Cohort {
        labels: labels.to_vec(),
        samples,
        split,
        merge,
        build,
        filter,
    })
}

/// Everything that defines one training run apart from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub input: InputOptions,
    pub train: TrainConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunSpec {
            input: InputOptions {
                k_img: model.k_img,
                k_text: model.k_text,
                ..InputOptions::default()
            },
            model,
            train: TrainConfig::default(),
        }
    }
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.input.validate()?;
        self.train.validate()?;
        if self.input.k_img != self.model.k_img || self.input.k_text != self.model.k_text {
            return Err(Error::config(format!(
                "input capacity ({}, {}) differs from model capacity ({}, {})",
                self.input.k_img, self.input.k_text, self.model.k_img, self.model.k_text
            )));
        }
        Ok(())
    }
}

/// Model inputs for one split, with demographics in the same order.
pub fn examples_for(
    cohort: &Cohort,
    store: &EmbeddingStore,
    split: Split,
    input: &InputOptions,
) -> Result<(Vec<Example>, Vec<Demographics>)> {
    let mut examples = Vec::new();
    let mut demo = Vec::new();
    for s in cohort.of_split(split) {
        examples.push(Example {
            input: prepare_input(s, store, input)?,
            targets: s.labels.clone(),
        });
        demo.push(s.demographics);
    }
    Ok((examples, demo))
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
    pub test: MetricReport,
}

/// Scores and the metric report for one split under the current weights.
pub fn evaluate_split(
    model: &HistAid,
    cohort: &Cohort,
    store: &EmbeddingStore,
    split: Split,
    input: &InputOptions,
) -> Result<MetricReport> {
    let (examples, demo) = examples_for(cohort, store, split, input)?;
    let scores = predict_all(model, &examples)?;
    let targets: Vec<Vec<f64>> = examples.into_iter().map(|e| e.targets).collect();
    evaluate(&cohort.labels, &scores, &targets, Some(&demo))
}

/// Train on the train split, select on val, report on test. The seed
/// drives both initialization and training order.
pub fn run_seed(cohort: &Cohort, store: &EmbeddingStore, spec: &RunSpec, seed: u64) -> Result<RunResult> {
    spec.validate()?;
    if spec.model.store_dim != store.dim() {
        return Err(Error::config(format!(
            "model expects {}-wide embeddings, store holds {}",
            spec.model.store_dim,
            store.dim()
        )));
    }
    if spec.model.num_labels != cohort.labels.len() {
        return Err(Error::config(format!(
            "model has {} outputs, cohort has {} labels",
            spec.model.num_labels,
            cohort.labels.len()
        )));
    }
    let (train, _) = examples_for(cohort, store, Split::Train, &spec.input)?;
    let (val, _) = examples_for(cohort, store, Split::Val, &spec.input)?;
    let mut model = HistAid::new(spec.model.clone(), seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let outcome = fit(&mut model, &train, &val, &train_cfg)?;
    let test = evaluate_split(&model, cohort, store, Split::Test, &spec.input)?;
    let meta = CheckpointMeta {
        epoch: outcome.best_epoch,
        val_auroc: outcome.best_val_auroc,
        labels: cohort.labels.clone(),
        model: spec.model.clone(),
        extra: serde_json::json!({ "seed": seed, "input": spec.input }),
    };
    Ok(RunResult {
        seed,
        log: outcome.log,
        checkpoint: Checkpoint::capture(meta, &model.params),
        test,
    })
}

/// Runs every seed, up to `jobs` at a time. Results come back in seed order.
pub fn run_seeds(
    cohort: &Cohort,
    store: &EmbeddingStore,
    spec: &RunSpec,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<RunResult>> {
    let jobs = jobs.max(1);
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        let results: Vec<Result<RunResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(cohort, store, spec, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::contract("training thread panicked"))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    NumReports,
    TimeWindowDays,
    Positional,
    Pooling,
    Fusion,
    Sections,
    ModalityCombo,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 7] = [
        AblationAxis::NumReports,
        AblationAxis::TimeWindowDays,
        AblationAxis::Positional,
        AblationAxis::Pooling,
        AblationAxis::Fusion,
        AblationAxis::Sections,
        AblationAxis::ModalityCombo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::NumReports => "num_reports",
            AblationAxis::TimeWindowDays => "time_window_days",
            AblationAxis::Positional => "positional",
            AblationAxis::Pooling => "pooling",
            AblationAxis::Fusion => "fusion",
            AblationAxis::Sections => "sections",
            AblationAxis::ModalityCombo => "modality_combo",
        }
    }

    /// Apply one axis value. Numeric axes accept `inf` (or `all`) for no
    /// limit. Modality combos are `image`, `text` and `image+text`.
    pub fn apply(self, value: &str, spec: &mut RunSpec, cohort: &mut CohortOptions) -> Result<()> {
        let bad = || Error::config(format!("invalid value `{value}` for axis {}", self.name()));
        let unlimited = matches!(value, "inf" | "all" | "none");
        match self {
            AblationAxis::NumReports => {
                spec.input.num_reports = if unlimited {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad())?)
                };
            }
            AblationAxis::TimeWindowDays => {
                spec.input.window_days = if unlimited {
                    None
                } else {
                    let d: f64 = value.parse().map_err(|_| bad())?;
                    if !(d > 0.0) {
                        return Err(bad());
                    }
                    (d.is_finite()).then_some(d)
                };
            }
            AblationAxis::Positional => {
                spec.model.encoder.positional.mode = value.parse::<PositionalMode>().map_err(|_| bad())?;
            }
            AblationAxis::Pooling => {
                spec.model.encoder.pooling = value.parse::<Pooling>().map_err(|_| bad())?;
            }
            AblationAxis::Fusion => {
                spec.model.fusion.method = value.parse::<FusionMethod>().map_err(|_| bad())?;
            }
            AblationAxis::Sections => {
                cohort.section_mode = value.parse::<SectionMode>().map_err(|_| bad())?;
            }
            AblationAxis::ModalityCombo => {
                let (image, text) = match value {
                    "image" => (true, false),
                    "text" => (false, true),
                    "image+text" | "both" => (true, true),
                    _ => return Err(bad()),
                };
                spec.input.current_image = image;
                if !text {
                    spec.input.num_reports = Some(0);
                }
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<String>,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("ablation needs at least one value"));
        }
        let (mut s, mut c) = (RunSpec::default(), CohortOptions::default());
        for v in &self.values {
            self.axis.apply(v, &mut s, &mut c)?;
        }
        Ok(())
    }
}

/// One (value, seed) cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub value: String,
    pub seed: u64,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub best_epoch: usize,
    /// No test sample kept any history report at this value.
    pub degenerate: bool,
}

/// Per-value summary; deltas and p-values are against the first value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub value: String,
    pub auroc: Option<MeanStd>,
    pub auprc: Option<MeanStd>,
    pub delta_auroc: Option<f64>,
    pub p_greater: Option<f64>,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub rows: Vec<GridRow>,
    pub summary: Vec<GridSummary>,
}

/// Source of cohorts for a given set of cohort options; ablating sections
/// needs a rebuilt cohort per value.
pub trait CohortSource {
    fn cohort(&self, opts: &CohortOptions) -> Result<Cohort>;
}

impl<F: Fn(&CohortOptions) -> Result<Cohort>> CohortSource for F {
    fn cohort(&self, opts: &CohortOptions) -> Result<Cohort> {
        self(opts)
    }
}

/// Cross product of values and seeds with everything else held fixed.
/// `on_run` sees every finished run, for logging or persisting artifacts.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    source: &dyn CohortSource,
    store: &EmbeddingStore,
    base: &RunSpec,
    base_cohort: &CohortOptions,
    ablation: &AblationSpec,
    seeds: &[u64],
    jobs: usize,
    on_run: &mut dyn FnMut(&str, &RunResult) -> Result<()>,
) -> Result<AblationGrid> {
    ablation.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut cohorts: BTreeMap<String, Cohort> = BTreeMap::new();
    let mut rows = Vec::new();
    for value in &ablation.values {
        let (mut spec, mut copts) = (base.clone(), base_cohort.clone());
        ablation.axis.apply(value, &mut spec, &mut copts)?;
        let key = serde_json::to_string(&copts)?;
        if !cohorts.contains_key(&key) {
            cohorts.insert(key.clone(), source.cohort(&copts)?);
        }
        let cohort = &cohorts[&key];
        let (test, _) = examples_for(cohort, store, Split::Test, &spec.input)?;
        let degenerate = test.iter().all(|e| e.input.text.valid_count() == 0);
        for run in run_seeds(cohort, store, &spec, seeds, jobs)? {
            on_run(value, &run)?;
            rows.push(GridRow {
                value: value.clone(),
                seed: run.seed,
                macro_auroc: run.test.macro_auroc,
                macro_auprc: run.test.macro_auprc,
                best_epoch: run.checkpoint.meta.epoch,
                degenerate,
            });
        }
    }
    let summary = summarize(&ablation.values, &rows)?;
    Ok(AblationGrid {
        axis: ablation.axis,
        rows,
        summary,
    })
}

/// Per-value mean and std, with the change and one-tailed p-value against
/// the first value.
pub fn summarize(values: &[String], rows: &[GridRow]) -> Result<Vec<GridSummary>> {
    let pick = |v: &str, f: fn(&GridRow) -> Option<f64>| -> Vec<f64> {
        rows.iter().filter(|r| r.value == v).filter_map(f).collect()
    };
    let base = values.first().map(|v| pick(v, |r| r.macro_auroc)).unwrap_or_default();
    let base_mean = MeanStd::of(&base).map(|m| m.mean);
    values
        .iter()
        .map(|v| {
            let auroc = pick(v, |r| r.macro_auroc);
            let a = MeanStd::of(&auroc);
            let p_greater = if auroc.is_empty() || base.is_empty() {
                None
            } else {
                Some(wilcoxon_one_tailed(&auroc, &base, Alternative::Greater)?)
            };
            Ok(GridSummary {
                value: v.clone(),
                auroc: a,
                auprc: MeanStd::of(&pick(v, |r| r.macro_auprc)),
                delta_auroc: a.zip(base_mean).map(|(a, b)| a.mean - b),
                p_greater,
                degenerate: rows.iter().any(|r| &r.value == v && r.degenerate),
            })
        })
        .collect()
}

/// Spearman rank correlation with midranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract("spearman needs two equal-length series of length >= 2"));
    }
    let (rx, ry) = (crate::metrics::midranks(x), crate::metrics::midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_cohort, SignalMode, SyntheticSpec};

    fn tiny() -> (Cohort, EmbeddingStore, RunSpec) {
        let synth = SyntheticSpec {
            n_subjects: 30,
            visits_max: 4,
            dim: 6,
            labels: vec!["A".into(), "B".into()],
            signal: SignalMode::HistoryTextRecent,
            ..SyntheticSpec::default()
        };
        let c = synth_cohort(&synth, 1).unwrap();
        let cohort = build_cohort(&c.images, &c.reports, &synth.labels, &CohortOptions::default()).unwrap();
        let mut spec = RunSpec::default();
        spec.model.store_dim = 6;
        spec.model.num_labels = 2;
        spec.model.k_text = 4;
        spec.input.k_text = 4;
        spec.model.encoder.layers = 1;
        spec.model.encoder.heads = 1;
        spec.model.encoder.model_dim = 8;
        spec.model.encoder.ff_dim = 8;
        spec.train.epochs = 2;
        spec.train.batch_size = 8;
        (cohort, c.store, spec)
    }

    #[test]
    fn cohort_splits_are_subject_disjoint() {
        let (cohort, _, _) = tiny();
        assert_eq!(cohort.samples.len(), cohort.build.samples);
        let total: usize = [Split::Train, Split::Val, Split::Test].iter().map(|&s| cohort.count(s)).sum();
        assert_eq!(total, cohort.samples.len());
        for s in &cohort.samples {
            assert_eq!(cohort.split.of(&s.subject_id), s.split);
        }
    }

    #[test]
    fn run_is_deterministic() {
        let (cohort, store, spec) = tiny();
        let a = run_seed(&cohort, &store, &spec, 3).unwrap();
        let b = run_seed(&cohort, &store, &spec, 3).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.test, b.test);
        let both = run_seeds(&cohort, &store, &spec, &[3, 4], 2).unwrap();
        assert_eq!(both[0].log, a.log);
        assert_eq!(both[1].seed, 4);
    }

    #[test]
    fn axis_values_apply() {
        let (mut s, mut c) = (RunSpec::default(), CohortOptions::default());
        AblationAxis::NumReports.apply("3", &mut s, &mut c).unwrap();
        assert_eq!(s.input.num_reports, Some(3));
        AblationAxis::TimeWindowDays.apply("inf", &mut s, &mut c).unwrap();
        assert_eq!(s.input.window_days, None);
        AblationAxis::TimeWindowDays.apply("30", &mut s, &mut c).unwrap();
        assert_eq!(s.input.window_days, Some(30.0));
        assert!(AblationAxis::TimeWindowDays.apply("-1", &mut s, &mut c).is_err());
        AblationAxis::Sections.apply("both", &mut s, &mut c).unwrap();
        assert_eq!(c.section_mode, SectionMode::Both);
        AblationAxis::ModalityCombo.apply("text", &mut s, &mut c).unwrap();
        assert!(!s.input.current_image);
        assert_eq!("fusion".parse::<AblationAxis>().unwrap(), AblationAxis::Fusion);
    }

    #[test]
    fn grid_has_value_by_seed_rows() {
        let (cohort, store, spec) = tiny();
        let source = |_: &CohortOptions| Ok(cohort.clone());
        let ab = AblationSpec {
            axis: AblationAxis::NumReports,
            values: vec!["0".into(), "2".into()],
        };
        let mut seen = 0;
        let grid = ablate(
            &source,
            &store,
            &spec,
            &CohortOptions::default(),
            &ab,
            &[0, 1],
            1,
            &mut |_, _| {
                seen += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(grid.rows.len(), 4);
        assert_eq!(seen, 4);
        assert!(grid.summary[0].degenerate && !grid.summary[1].degenerate);
        assert_eq!(grid.summary[0].delta_auroc, Some(0.0));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
