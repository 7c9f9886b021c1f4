//! Longitudinal samples: one per anchor study, with every earlier report as
//! history.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{text_key, Demographics, SectionMode, StudyRecord};
use crate::error::{Error, Result};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryReport {
    pub study_id: String,
    pub text_key: String,
    pub offset_hours: f64,
    pub has_impression: bool,
    pub has_findings: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryImage {
    pub image_key: String,
    pub offset_hours: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalSample {
    pub subject_id: String,
    pub anchor_study_id: String,
    pub anchor_time: i64,
    pub anchor_has_impression: bool,
    /// Current scan.
    pub image_key: Option<String>,
    /// Oldest first.
    pub history_reports: Vec<HistoryReport>,
    /// Oldest first.
    pub history_images: Vec<HistoryImage>,
    pub labels: Vec<f64>,
    pub demographics: Demographics,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub subjects: usize,
    pub studies: usize,
    pub samples: usize,
    /// Studies sharing a chart time with another study of the same subject.
    pub time_ties: usize,
}

/// One sample per anchor study with at least `min_history` earlier studies.
/// Studies are ordered by `(chart_time, study_id)`; history is every other
/// study before the anchor in that order.
pub fn build_samples(
    records: &[StudyRecord],
    min_history: usize,
    mode: SectionMode,
) -> (Vec<TemporalSample>, BuildStats) {
    let mut by_subject: BTreeMap<&str, Vec<&StudyRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject_id).or_default().push(r);
    }
    let mut stats = BuildStats {
        subjects: by_subject.len(),
        studies: records.len(),
        ..BuildStats::default()
    };
    let mut out = Vec::new();
    for studies in by_subject.values_mut() {
        studies.sort_by(|a, b| (a.chart_time, &a.study_id).cmp(&(b.chart_time, &b.study_id)));
        stats.time_ties += studies
            .windows(2)
            .filter(|w| w[0].chart_time == w[1].chart_time)
            .count();
        for (k, anchor) in studies.iter().enumerate() {
            if k < min_history {
                continue;
            }
            let hours = |t: i64| (anchor.chart_time - t) as f64 / SECONDS_PER_HOUR;
            // a repeated copy of the anchor study is not its own history
            let earlier: Vec<&&StudyRecord> = studies[..k]
                .iter()
                .filter(|r| r.study_id != anchor.study_id)
                .collect();
            out.push(TemporalSample {
                subject_id: anchor.subject_id.clone(),
                anchor_study_id: anchor.study_id.clone(),
                anchor_time: anchor.chart_time,
                anchor_has_impression: anchor.sections.has_impression(),
                image_key: anchor.image_embedding_key.clone(),
                history_reports: earlier
                    .iter()
                    .map(|r| HistoryReport {
                        study_id: r.study_id.clone(),
                        text_key: text_key(&r.study_id, mode),
                        offset_hours: hours(r.chart_time),
                        has_impression: r.sections.has_impression(),
                        has_findings: r.sections.has_findings(),
                    })
                    .collect(),
                history_images: earlier
                    .iter()
                    .filter_map(|r| {
                        r.image_embedding_key.as_ref().map(|k| HistoryImage {
                            image_key: k.clone(),
                            offset_hours: hours(r.chart_time),
                        })
                    })
                    .collect(),
                labels: anchor.labels.iter().map(|l| l.binarize()).collect(),
                demographics: anchor.demographics,
                split: None,
            });
        }
    }
    stats.samples = out.len();
    (out, stats)
}

/// Fails on the first history item at or after its anchor.
pub fn check_leakage(samples: &[TemporalSample]) -> Result<()> {
    for s in samples {
        let offsets = s
            .history_reports
            .iter()
            .map(|r| (r.study_id.as_str(), r.offset_hours))
            .chain(s.history_images.iter().map(|i| (i.image_key.as_str(), i.offset_hours)));
        for (what, off) in offsets {
            if !(off > 0.0) {
                return Err(Error::Leakage(format!(
                    "subject {} anchor {}: history item {what} has offset {off} h",
                    s.subject_id, s.anchor_study_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub samples_in: usize,
    pub samples_out: usize,
    pub anchors_without_impression: usize,
    pub duplicate_history: usize,
    pub history_without_impression: usize,
    pub history_missing_section: usize,
    pub duplicate_anchors: usize,
}

/// Drop anchors without an impression, repeated anchors, repeated history
/// entries, history reports without an impression and history reports
/// lacking the section `mode` needs.
pub fn dedup_filter(samples: Vec<TemporalSample>, mode: SectionMode) -> (Vec<TemporalSample>, FilterStats) {
    let mut stats = FilterStats {
        samples_in: samples.len(),
        ..FilterStats::default()
    };
    let mut seen_anchor = HashSet::new();
    let mut out = Vec::with_capacity(samples.len());
    for mut s in samples {
        if !s.anchor_has_impression {
            stats.anchors_without_impression += 1;
            continue;
        }
        if !seen_anchor.insert((s.subject_id.clone(), s.anchor_study_id.clone())) {
            stats.duplicate_anchors += 1;
            continue;
        }
        let mut seen = HashSet::new();
        s.history_reports.retain(|r| {
            if !seen.insert((r.text_key.clone(), r.offset_hours.to_bits())) {
                stats.duplicate_history += 1;
                return false;
            }
            if !r.has_impression {
                stats.history_without_impression += 1;
                return false;
            }
            let ok = match mode {
                SectionMode::Impression => true,
                SectionMode::Finding | SectionMode::Both => r.has_findings,
            };
            if !ok {
                stats.history_missing_section += 1;
            }
            ok
        });
        let mut seen = HashSet::new();
        s.history_images
            .retain(|i| seen.insert((i.image_key.clone(), i.offset_hours.to_bits())));
        out.push(s);
    }
    out.sort_by(|a, b| {
        (&a.subject_id, a.anchor_time, &a.anchor_study_id).cmp(&(&b.subject_id, b.anchor_time, &b.anchor_study_id))
    });
    stats.samples_out = out.len();
    (out, stats)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl CohortSplit {
    pub fn of(&self, subject: &str) -> Option<Split> {
        let has = |v: &Vec<String>| v.binary_search_by(|s| s.as_str().cmp(subject)).is_ok();
        if has(&self.train) {
            Some(Split::Train)
        } else if has(&self.val) {
            Some(Split::Val)
        } else if has(&self.test) {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// Tag each sample with its subject's split.
    pub fn assign(&self, samples: &mut [TemporalSample]) -> Result<()> {
        for s in samples {
            s.split = Some(
                self.of(&s.subject_id)
                    .ok_or_else(|| Error::contract(format!("subject {} is in no split", s.subject_id)))?,
            );
        }
        Ok(())
    }
}

/// Seeded shuffle of the distinct subjects, cut by cumulative fraction of
/// the subject count. Every split is non-empty.
pub fn split_patients(subjects: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<CohortSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut ids: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let n = ids.len();
    if n < 3 {
        return Err(Error::config(format!("need at least 3 subjects to split, got {n}")));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut1 = ((n as f64 * a).round() as usize).clamp(1, n - 2);
    let cut2 = ((n as f64 * (a + b)).round() as usize).clamp(cut1 + 1, n - 1);
    let part = |r: std::ops::Range<usize>| {
        let mut v = ids[r].to_vec();
        v.sort();
        v
    };
    Ok(CohortSplit {
        train: part(0..cut1),
        val: part(cut1..cut2),
        test: part(cut2..n),
    })
}

pub fn write_manifest<W: Write>(mut out: W, samples: &[TemporalSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<TemporalSample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::{LabelValue, Race, Sections, Sex};

    fn rec(subject: &str, study: &str, t: i64, impression: &str) -> StudyRecord {
        StudyRecord {
            subject_id: subject.into(),
            study_id: study.into(),
            chart_time: t,
            image_embedding_key: Some(format!("{study}/image")),
            sections: Sections {
                impression: Some(impression.into()),
                ..Sections::default()
            },
            labels: vec![LabelValue::Positive, LabelValue::Uncertain],
            demographics: Demographics {
                sex: Sex::F,
                age_years: 70,
                race: Race::Black,
            },
        }
    }

    fn five_visits() -> Vec<StudyRecord> {
        (1..=5)
            .rev()
            .map(|i| rec("p", &format!("s{i}"), i * 7200, "ok"))
            .collect()
    }

    #[test]
    fn five_timestamps_give_five_samples() {
        let (samples, stats) = build_samples(&five_visits(), 0, SectionMode::Impression);
        assert_eq!(samples.len(), 5);
        assert_eq!(stats.samples, 5);
        let last = &samples[4];
        assert_eq!(last.anchor_study_id, "s5");
        assert_eq!(last.history_reports.len(), 4);
        let offs: Vec<f64> = last.history_reports.iter().map(|r| r.offset_hours).collect();
        assert_eq!(offs, vec![8.0, 6.0, 4.0, 2.0]);
        assert_eq!(last.labels, vec![1.0, 0.0]);
        assert_eq!(last.history_reports[0].text_key, "s1/impression");
        check_leakage(&samples).unwrap();
    }

    #[test]
    fn single_timestamp_has_empty_history() {
        let (samples, _) = build_samples(&[rec("q", "x", 100, "ok")], 0, SectionMode::Impression);
        assert_eq!(samples.len(), 1);
        assert!(samples[0].history_reports.is_empty());
    }

    #[test]
    fn min_history_skips_early_anchors() {
        let (samples, _) = build_samples(&five_visits(), 2, SectionMode::Impression);
        assert_eq!(samples.len(), 3);
    }

    #[test]
    fn tied_times_break_by_study_id_and_trip_the_guard() {
        let recs = vec![rec("p", "b", 100, "x"), rec("p", "a", 100, "y")];
        let (samples, stats) = build_samples(&recs, 0, SectionMode::Impression);
        assert_eq!(stats.time_ties, 1);
        assert_eq!(samples[0].anchor_study_id, "a");
        assert!(matches!(check_leakage(&samples), Err(Error::Leakage(_))));
    }

    #[test]
    fn dedup_rules() {
        let (mut samples, _) = build_samples(&five_visits(), 0, SectionMode::Impression);
        let dup = samples[4].history_reports[1].clone();
        samples[4].history_reports.push(dup);
        samples[4].history_reports[0].has_impression = false;
        samples[2].anchor_has_impression = false;
        let (out, stats) = dedup_filter(samples, SectionMode::Impression);
        assert_eq!(out.len(), 4);
        assert_eq!(stats.anchors_without_impression, 1);
        assert_eq!(stats.duplicate_history, 1);
        assert_eq!(stats.history_without_impression, 1);
        assert_eq!(out[3].history_reports.len(), 3);
    }

    #[test]
    fn duplicate_studies_collapse_in_dedup() {
        let mut recs = five_visits();
        recs.push(rec("p", "s3", 3 * 7200, "ok"));
        let (samples, _) = build_samples(&recs, 0, SectionMode::Impression);
        assert_eq!(samples.len(), 6);
        check_leakage(&samples).unwrap();
        let (out, stats) = dedup_filter(samples, SectionMode::Impression);
        assert_eq!(out.len(), 5);
        assert_eq!(stats.duplicate_anchors, 1);
        assert_eq!(stats.duplicate_history, 2);
        assert_eq!(out[4].history_reports.len(), 4);
    }

    #[test]
    fn whitespace_impression_drops_the_anchor() {
        let (samples, _) = build_samples(&[rec("p", "a", 10, "  \n")], 0, SectionMode::Impression);
        let (out, _) = dedup_filter(samples, SectionMode::Impression);
        assert!(out.is_empty());
    }

    #[test]
    fn finding_mode_skips_reports_without_findings() {
        let (samples, _) = build_samples(&five_visits(), 0, SectionMode::Finding);
        let (out, stats) = dedup_filter(samples, SectionMode::Finding);
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|s| s.history_reports.is_empty()));
        assert_eq!(stats.history_missing_section, 10);
    }

    #[test]
    fn split_sizes() {
        let ten: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let s = split_patients(&ten, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let three: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        let s = split_patients(&three, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        assert!(matches!(
            split_patients(&three[..2], (0.8, 0.1, 0.1), 7),
            Err(Error::Config(_))
        ));
        assert!(split_patients(&ten, (0.5, 0.1, 0.1), 7).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let (samples, _) = build_samples(&five_visits(), 0, SectionMode::Impression);
        let mut buf = Vec::new();
        write_manifest(&mut buf, &samples).unwrap();
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), samples);
    }
}
