//! Synthetic longitudinal cohorts with a planted, known signal.
//!
//! Each label owns one unit direction in image space and one in text
//! space (orthonormal when the label count allows). An embedding is the sum
//! of `±amplitude` along the directions of its visit's label state, plus
//! unit Gaussian noise per coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::records::{text_key, Demographics, ImageRow, LabelValue, Race, ReportRow, SectionMode, Sections, Sex};
use super::store::EmbeddingStore;
use crate::encoder::Modality;
use crate::error::{Error, Result};

pub const DEFAULT_LABELS: [&str; 13] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

pub fn default_labels() -> Vec<String> {
    DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Labels are independent per visit and visible only in the current scan.
    CurrentImageOnly,
    /// A persistent label state, weakly visible in the current scan and
    /// strongly in every report.
    #[default]
    HistoryTextRecent,
    /// Visits come in clusters. The state persists within a cluster and
    /// flips across the long gaps between clusters, so reports older than
    /// the gap contradict the current label.
    HistoryTextStale,
    /// The label is the XOR of a bit in the current scan and a persistent
    /// bit in the reports.
    CrossModalXor,
    /// Each report carries a Gaussian score; the label is the sign of the
    /// recency-weighted sum of scores over the history.
    HistoryTextTrend,
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown signal mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub dim: usize,
    pub labels: Vec<String>,
    pub signal: SignalMode,
    /// Label-state persistence across a gap of `g` days is `2^(-g / halflife)`.
    pub recency_halflife_days: f64,
    pub prevalence: f64,
    pub image_amplitude: f64,
    pub text_amplitude: f64,
    /// Regular gaps between visits, uniform in days.
    pub gap_days: (f64, f64),
    /// Within-cluster gaps for the stale mode.
    pub short_gap_days: (f64, f64),
    /// Between-cluster gaps for the stale mode.
    pub long_gap_days: (f64, f64),
    pub long_gap_prob: f64,
    /// Probability that the state flips across a long gap.
    pub flip_prob: f64,
    /// Recency scale of the trend weights `exp(-t_norm / tau)`.
    pub trend_tau: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 300,
            visits_min: 1,
            visits_max: 8,
            dim: 32,
            labels: default_labels(),
            signal: SignalMode::HistoryTextRecent,
            recency_halflife_days: 365.0,
            prevalence: 0.3,
            image_amplitude: 0.5,
            text_amplitude: 2.5,
            gap_days: (7.0, 60.0),
            short_gap_days: (1.0, 10.0),
            long_gap_days: (60.0, 240.0),
            long_gap_prob: 0.35,
            flip_prob: 0.9,
            trend_tau: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synthetic spec: {m}")));
        if self.n_subjects < 3 {
            return bad("need at least 3 subjects");
        }
        if self.visits_min < 1 || self.visits_max < self.visits_min {
            return bad("visits must satisfy 1 <= visits_min <= visits_max");
        }
        if self.dim == 0 || self.labels.is_empty() {
            return bad("dim and label count must be positive");
        }
        if !(0.0..=1.0).contains(&self.prevalence)
            || !(0.0..=1.0).contains(&self.long_gap_prob)
            || !(0.0..=1.0).contains(&self.flip_prob)
        {
            return bad("probabilities must lie in [0, 1]");
        }
        for (lo, hi) in [self.gap_days, self.short_gap_days, self.long_gap_days] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return bad("gap ranges must be positive and ordered");
            }
        }
        if !(self.recency_halflife_days > 0.0 && self.trend_tau > 0.0) {
            return bad("halflife and trend_tau must be positive");
        }
        if !(self.image_amplitude.is_finite() && self.text_amplitude.is_finite()) {
            return bad("amplitudes must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCohort {
    pub images: Vec<ImageRow>,
    pub reports: Vec<ReportRow>,
    pub store: EmbeddingStore,
}

const DAY: f64 = 86_400.0;
const EPOCH_BASE: i64 = 1_500_000_000;

/// `n` unit directions in `dim` dimensions, orthonormal while `n <= dim`.
fn directions(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if i < dim {
            for u in &out[..i] {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

fn embed(rng: &mut ChaCha8Rng, dirs: &[Vec<f64>], coef: &[f64], dim: usize) -> Vec<f32> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    for (d, c) in dirs.iter().zip(coef) {
        v.iter_mut().zip(d).for_each(|(x, u)| *x += c * u);
    }
    v.into_iter().map(|x| x as f32).collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn sign(b: bool) -> f64 {
    if b {
        1.0
    } else {
        -1.0
    }
}

struct Visit {
    time: i64,
    labels: Vec<bool>,
    image_coef: Vec<f64>,
    text_coef: Vec<f64>,
}

/// Deterministic per `(spec, seed)`.
pub fn synth_cohort(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCohort> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.labels.len();
    let img_dirs = directions(&mut rng, c, spec.dim);
    let txt_dirs = directions(&mut rng, c, spec.dim);
    let mut store = EmbeddingStore::new(spec.dim as u32)?;
    let mut images = Vec::new();
    let mut reports = Vec::new();
    let width = spec.n_subjects.to_string().len().max(4);
    for s in 0..spec.n_subjects {
        let subject = format!("p{s:0width$}");
        let n_visits = rng.random_range(spec.visits_min..=spec.visits_max);
        let demographics = Demographics {
            sex: if rng.random_bool(0.5) { Sex::F } else { Sex::M },
            age_years: rng.random_range(20..96),
            race: [Race::White, Race::Black, Race::Asian, Race::Other][rng.random_range(0..4)],
        };
        let start = EPOCH_BASE + rng.random_range(0..(3 * 365 * DAY as i64));
        let visits = simulate(spec, &mut rng, n_visits, start);
        for (k, v) in visits.iter().enumerate() {
            let study = format!("{subject}-{k:02}");
            let image_key = format!("{study}/image");
            store.insert(&image_key, Modality::Image, embed(&mut rng, &img_dirs, &v.image_coef, spec.dim))?;
            for mode in SectionMode::ALL {
                let e = embed(&mut rng, &txt_dirs, &v.text_coef, spec.dim);
                store.insert(text_key(&study, mode), Modality::Text, e)?;
            }
            images.push(ImageRow {
                subject_id: subject.clone(),
                study_id: study.clone(),
                chart_time: v.time,
                image_embedding_key: Some(image_key),
            });
            reports.push(ReportRow {
                subject_id: subject.clone(),
                study_id: study.clone(),
                chart_time: v.time,
                demographics,
                sections: Sections {
                    history: None,
                    indication: Some("Routine follow-up.".into()),
                    comparison: (k > 0).then(|| "Prior study.".into()),
                    findings: Some(format!("Synthetic findings for study {study}.")),
                    impression: Some(format!("Synthetic impression for study {study}.")),
                },
                labels: v
                    .labels
                    .iter()
                    .map(|&y| if y { LabelValue::Positive } else { LabelValue::Negative })
                    .collect(),
            });
        }
    }
    Ok(SyntheticCohort { images, reports, store })
}

fn simulate(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, n: usize, start: i64) -> Vec<Visit> {
    let c = spec.labels.len();
    let a_img = spec.image_amplitude;
    let a_txt = spec.text_amplitude;
    let mut times = vec![start];
    let mut long_gap = vec![false];
    for _ in 1..n {
        let (gap, long) = match spec.signal {
            SignalMode::HistoryTextStale => {
                if rng.random_bool(spec.long_gap_prob) {
                    (uniform(rng, spec.long_gap_days), true)
                } else {
                    (uniform(rng, spec.short_gap_days), false)
                }
            }
            _ => (uniform(rng, spec.gap_days), false),
        };
        let prev = *times.last().expect("non-empty");
        times.push(prev + (gap * DAY).round().max(1.0) as i64);
        long_gap.push(long);
    }
    let persist = |rng: &mut ChaCha8Rng, gap_s: i64| {
        let days = gap_s as f64 / DAY;
        rng.random_bool(2f64.powf(-days / spec.recency_halflife_days))
    };
    let mut visits: Vec<Visit> = Vec::with_capacity(n);
    match spec.signal {
        SignalMode::CurrentImageOnly => {
            for &t in &times {
                let y: Vec<bool> = (0..c).map(|_| rng.random_bool(spec.prevalence)).collect();
                visits.push(Visit {
                    time: t,
                    image_coef: y.iter().map(|&b| a_img * sign(b)).collect(),
                    text_coef: vec![0.0; c],
                    labels: y,
                });
            }
        }
        SignalMode::HistoryTextRecent | SignalMode::HistoryTextStale => {
            let mut state: Vec<bool> = (0..c).map(|_| rng.random_bool(spec.prevalence)).collect();
            for k in 0..n {
                if k > 0 {
                    for z in state.iter_mut() {
                        if spec.signal == SignalMode::HistoryTextStale {
                            if long_gap[k] && rng.random_bool(spec.flip_prob) {
                                *z = !*z;
                            }
                        } else if !persist(rng, times[k] - times[k - 1]) {
                            *z = rng.random_bool(spec.prevalence);
                        }
                    }
                }
                visits.push(Visit {
                    time: times[k],
                    image_coef: state.iter().map(|&b| a_img * sign(b)).collect(),
                    text_coef: state.iter().map(|&b| a_txt * sign(b)).collect(),
                    labels: state.clone(),
                });
            }
        }
        SignalMode::CrossModalXor => {
            let mut b: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
            for k in 0..n {
                let prev_b = b.clone();
                if k > 0 {
                    for z in b.iter_mut() {
                        if !persist(rng, times[k] - times[k - 1]) {
                            *z = rng.random_bool(0.5);
                        }
                    }
                }
                let a: Vec<bool> = (0..c).map(|_| rng.random_bool(0.5)).collect();
                visits.push(Visit {
                    time: times[k],
                    image_coef: a.iter().map(|&x| a_img * sign(x)).collect(),
                    text_coef: b.iter().map(|&x| a_txt * sign(x)).collect(),
                    labels: a.iter().zip(&prev_b).map(|(x, y)| x ^ y).collect(),
                });
            }
        }
        SignalMode::HistoryTextTrend => {
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            for k in 0..n {
                let labels = if k == 0 {
                    (0..c).map(|_| rng.random_bool(0.5)).collect()
                } else {
                    let span = (times[k] - times[0]) as f64;
                    let weights: Vec<f64> = (0..k)
                        .map(|j| {
                            let t_norm = (times[k] - times[j]) as f64 / span;
                            (-t_norm / spec.trend_tau).exp()
                        })
                        .collect();
                    (0..c)
                        .map(|l| (0..k).map(|j| weights[j] * scores[j][l]).sum::<f64>() > 0.0)
                        .collect()
                };
                visits.push(Visit {
                    time: times[k],
                    image_coef: vec![0.0; c],
                    text_coef: scores[k].iter().map(|g| a_txt * g).collect(),
                    labels,
                });
            }
        }
    }
    visits
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(signal: SignalMode) -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: 20,
            labels: vec!["A".into(), "B".into()],
            dim: 8,
            signal,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        for mode in [
            SignalMode::CurrentImageOnly,
            SignalMode::HistoryTextRecent,
            SignalMode::HistoryTextStale,
            SignalMode::CrossModalXor,
            SignalMode::HistoryTextTrend,
        ] {
            let a = synth_cohort(&small(mode), 3).unwrap();
            let b = synth_cohort(&small(mode), 3).unwrap();
            assert_eq!(a.store.to_bytes(), b.store.to_bytes());
            assert_eq!(a.images, b.images);
            assert_eq!(a.reports, b.reports);
            let c = synth_cohort(&small(mode), 4).unwrap();
            assert_ne!(a.store.to_bytes(), c.store.to_bytes());
        }
    }

    #[test]
    fn every_study_has_all_keys() {
        let c = synth_cohort(&small(SignalMode::HistoryTextRecent), 0).unwrap();
        for r in &c.images {
            assert!(c.store.contains(r.image_embedding_key.as_ref().unwrap()));
            for m in SectionMode::ALL {
                assert!(c.store.contains(&text_key(&r.study_id, m)));
            }
        }
        assert_eq!(c.store.len(), 4 * c.images.len());
    }

    #[test]
    fn directions_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = directions(&mut rng, 5, 8);
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut s = small(SignalMode::HistoryTextRecent);
        s.visits_min = 0;
        assert!(matches!(synth_cohort(&s, 0), Err(Error::Config(_))));
        let mut s = small(SignalMode::HistoryTextRecent);
        s.prevalence = 1.5;
        assert!(synth_cohort(&s, 0).is_err());
    }

    #[test]
    fn signal_mode_names_parse() {
        assert_eq!("cross_modal_xor".parse::<SignalMode>().unwrap(), SignalMode::CrossModalXor);
        assert!("bogus".parse::<SignalMode>().is_err());
    }
}
