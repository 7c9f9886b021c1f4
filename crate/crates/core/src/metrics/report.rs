use serde::{Deserialize, Serialize};

use super::rank::{auprc, auroc};
use super::wilcoxon::{wilcoxon_one_tailed, Alternative};
use crate::data::{Demographics, Race, Sex};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBin {
    Under40,
    From40To60,
    From60To80,
    Over80,
}

impl AgeBin {
    pub const ALL: [AgeBin; 4] = [AgeBin::Under40, AgeBin::From40To60, AgeBin::From60To80, AgeBin::Over80];

    /// Left-closed bins: [0,40), [40,60), [60,80), [80,inf).
    pub fn of(age_years: u32) -> AgeBin {
        match age_years {
            0..=39 => AgeBin::Under40,
            40..=59 => AgeBin::From40To60,
            60..=79 => AgeBin::From60To80,
            _ => AgeBin::Over80,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgeBin::Under40 => "<40",
            AgeBin::From40To60 => "40-60",
            AgeBin::From60To80 => "60-80",
            AgeBin::Over80 => ">80",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupAxis {
    Sex,
    Age,
    Race,
}

impl SubgroupAxis {
    pub const ALL: [SubgroupAxis; 3] = [SubgroupAxis::Sex, SubgroupAxis::Age, SubgroupAxis::Race];

    pub fn name(self) -> &'static str {
        match self {
            SubgroupAxis::Sex => "sex",
            SubgroupAxis::Age => "age",
            SubgroupAxis::Race => "race",
        }
    }

    /// Every group on this axis, in display order.
    pub fn groups(self) -> Vec<&'static str> {
        match self {
            SubgroupAxis::Sex => vec!["F", "M"],
            SubgroupAxis::Age => AgeBin::ALL.iter().map(|b| b.name()).collect(),
            SubgroupAxis::Race => vec!["White", "Black", "Asian", "Other"],
        }
    }

    pub fn group_of(self, d: &Demographics) -> &'static str {
        match self {
            SubgroupAxis::Sex => match d.sex {
                Sex::F => "F",
                Sex::M => "M",
            },
            SubgroupAxis::Age => AgeBin::of(d.age_years).name(),
            SubgroupAxis::Race => match d.race {
                Race::White => "White",
                Race::Black => "Black",
                Race::Asian => "Asian",
                Race::Other => "Other",
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetric {
    pub label: String,
    pub n: usize,
    pub positives: usize,
    /// `None` when the label has a single class in this set.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupCell {
    pub axis: SubgroupAxis,
    pub group: String,
    pub n: usize,
    /// Macro means over the labels defined within the cell; `None` when no
    /// label is defined there.
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub labels_defined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub labels: Vec<String>,
    pub n_samples: usize,
    pub per_label: Vec<LabelMetric>,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    /// Labels left out of the macro means for being single-class.
    pub skipped_auroc: usize,
    pub skipped_auprc: usize,
    pub subgroups: Vec<SubgroupCell>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

fn check_rows(labels: usize, scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![scores.len()],
            rhs: vec![targets.len()],
        });
    }
    for (s, t) in scores.iter().zip(targets) {
        if s.len() != labels || t.len() != labels {
            return Err(Error::Shape {
                op: "evaluate",
                lhs: vec![s.len(), t.len()],
                rhs: vec![labels],
            });
        }
    }
    Ok(())
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn per_label(labels: &[String], scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<LabelMetric>> {
    labels
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let t: Vec<f64> = targets.iter().map(|r| r[c]).collect();
            Ok(LabelMetric {
                label: name.clone(),
                n: s.len(),
                positives: t.iter().filter(|&&v| v == 1.0).count(),
                auroc: defined(auroc(&s, &t))?,
                auprc: defined(auprc(&s, &t))?,
            })
        })
        .collect()
}

/// Per-label and macro metrics for one scored set. `scores` and `targets`
/// are row-per-sample. Subgroup cells are added when demographics are given.
pub fn evaluate(
    labels: &[String],
    scores: &[Vec<f64>],
    targets: &[Vec<f64>],
    demographics: Option<&[Demographics]>,
) -> Result<MetricReport> {
    check_rows(labels.len(), scores, targets)?;
    let per_label = per_label(labels, scores, targets)?;
    let (macro_auroc, skipped_auroc) = mean_present(per_label.iter().map(|m| m.auroc));
    let (macro_auprc, skipped_auprc) = mean_present(per_label.iter().map(|m| m.auprc));
    let subgroups = match demographics {
        Some(d) => subgroup_metrics(labels, d, scores, targets)?,
        None => Vec::new(),
    };
    Ok(MetricReport {
        labels: labels.to_vec(),
        n_samples: scores.len(),
        per_label,
        macro_auroc,
        macro_auprc,
        skipped_auroc,
        skipped_auprc,
        subgroups,
    })
}

/// Metrics within every demographic cell on every axis. Cells with no
/// samples, or with no label defined, are kept with their counts and `None`
/// metrics.
pub fn subgroup_metrics(
    labels: &[String],
    demographics: &[Demographics],
    scores: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<Vec<SubgroupCell>> {
    check_rows(labels.len(), scores, targets)?;
    if demographics.len() != scores.len() {
        return Err(Error::Shape {
            op: "subgroup_metrics",
            lhs: vec![demographics.len()],
            rhs: vec![scores.len()],
        });
    }
    let mut cells = Vec::new();
    for axis in SubgroupAxis::ALL {
        for group in axis.groups() {
            let rows: Vec<usize> = (0..demographics.len())
                .filter(|&i| axis.group_of(&demographics[i]) == group)
                .collect();
            let s: Vec<Vec<f64>> = rows.iter().map(|&i| scores[i].clone()).collect();
            let t: Vec<Vec<f64>> = rows.iter().map(|&i| targets[i].clone()).collect();
            let metrics = per_label(labels, &s, &t)?;
            let (macro_auroc, skipped) = mean_present(metrics.iter().map(|m| m.auroc));
            let (macro_auprc, _) = mean_present(metrics.iter().map(|m| m.auprc));
            cells.push(SubgroupCell {
                axis,
                group: group.to_string(),
                n: rows.len(),
                macro_auroc,
                macro_auprc,
                labels_defined: labels.len() - skipped,
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Summation runs over sorted values so the result does not depend on
    /// input order.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        if v[0] == v[v.len() - 1] {
            return Some(MeanStd { mean: v[0], std: 0.0, n: v.len() });
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n: v.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAggregate {
    pub label: String,
    pub auroc: Option<MeanStd>,
    pub auprc: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupAggregate {
    pub axis: SubgroupAxis,
    pub group: String,
    /// Sample count of the cell in the first seed's report.
    pub n: usize,
    pub macro_auroc: Option<MeanStd>,
    pub macro_auprc: Option<MeanStd>,
}

/// One-tailed p-values for "model > baseline" over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    pub per_label_auroc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub labels: Vec<String>,
    pub n_seeds: usize,
    pub per_label: Vec<LabelAggregate>,
    pub macro_auroc: Option<MeanStd>,
    pub macro_auprc: Option<MeanStd>,
    pub subgroups: Vec<SubgroupAggregate>,
    pub vs_baseline: Option<Comparison>,
}

fn present(values: impl Iterator<Item = Option<f64>>) -> Vec<f64> {
    values.flatten().collect()
}

fn greater(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.is_empty() || y.is_empty() {
        return Ok(None);
    }
    wilcoxon_one_tailed(x, y, Alternative::Greater).map(Some)
}

/// Mean and sample std over seeds, plus rank-sum p-values against a
/// baseline's seeds when given.
pub fn seed_aggregate(reports: &[MetricReport], baseline: Option<&[MetricReport]>) -> Result<SeedAggregate> {
    let first = reports
        .first()
        .ok_or_else(|| Error::contract("seed aggregation needs at least one report"))?;
    let labels = &first.labels;
    for r in reports.iter().chain(baseline.unwrap_or(&[])) {
        if &r.labels != labels {
            return Err(Error::contract(format!(
                "label sets differ: {:?} vs {:?}",
                r.labels, labels
            )));
        }
    }
    let per_label = (0..labels.len())
        .map(|c| LabelAggregate {
            label: labels[c].clone(),
            auroc: MeanStd::of(&present(reports.iter().map(|r| r.per_label[c].auroc))),
            auprc: MeanStd::of(&present(reports.iter().map(|r| r.per_label[c].auprc))),
        })
        .collect();
    let subgroups = first
        .subgroups
        .iter()
        .enumerate()
        .map(|(i, cell)| SubgroupAggregate {
            axis: cell.axis,
            group: cell.group.clone(),
            n: cell.n,
            macro_auroc: MeanStd::of(&present(
                reports.iter().map(|r| r.subgroups.get(i).and_then(|c| c.macro_auroc)),
            )),
            macro_auprc: MeanStd::of(&present(
                reports.iter().map(|r| r.subgroups.get(i).and_then(|c| c.macro_auprc)),
            )),
        })
        .collect();
    let vs_baseline = match baseline {
        Some(base) => {
            let ours_auroc = present(reports.iter().map(|r| r.macro_auroc));
            let ours_auprc = present(reports.iter().map(|r| r.macro_auprc));
            let per_label_auroc = (0..labels.len())
                .map(|c| {
                    greater(
                        &present(reports.iter().map(|r| r.per_label[c].auroc)),
                        &present(base.iter().map(|r| r.per_label[c].auroc)),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Comparison {
                macro_auroc: greater(&ours_auroc, &present(base.iter().map(|r| r.macro_auroc)))?,
                macro_auprc: greater(&ours_auprc, &present(base.iter().map(|r| r.macro_auprc)))?,
                per_label_auroc,
            })
        }
        None => None,
    };
    Ok(SeedAggregate {
        labels: labels.clone(),
        n_seeds: reports.len(),
        per_label,
        macro_auroc: MeanStd::of(&present(reports.iter().map(|r| r.macro_auroc))),
        macro_auprc: MeanStd::of(&present(reports.iter().map(|r| r.macro_auprc))),
        subgroups,
        vs_baseline,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Per-pathology table, one row per (label, model), with a trailing macro
/// row per model.
pub fn label_table(models: &[(&str, &SeedAggregate)], delimiter: u8) -> Result<String> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(Vec::new());
    w.write_record(["label", "model", "auroc", "auprc", "auroc_std", "auprc_std", "seeds"])
        .map_err(csv_err)?;
    for (model, agg) in models {
        let rows = agg
            .per_label
            .iter()
            .map(|l| (l.label.as_str(), l.auroc, l.auprc))
            .chain(std::iter::once(("macro", agg.macro_auroc, agg.macro_auprc)));
        for (label, a, p) in rows {
            w.write_record([
                label.to_string(),
                model.to_string(),
                cell(a.map(|m| m.mean)),
                cell(p.map(|m| m.mean)),
                cell(a.map(|m| m.std)),
                cell(p.map(|m| m.std)),
                agg.n_seeds.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    into_string(w)
}

/// Subgroup table: one row per (axis, group, model).
pub fn subgroup_table(models: &[(&str, &SeedAggregate)], delimiter: u8) -> Result<String> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(Vec::new());
    w.write_record(["axis", "group", "model", "n", "auroc", "auroc_std", "auprc", "auprc_std"])
        .map_err(csv_err)?;
    for (model, agg) in models {
        for g in &agg.subgroups {
            w.write_record([
                g.axis.name().to_string(),
                g.group.clone(),
                model.to_string(),
                g.n.to_string(),
                cell(g.macro_auroc.map(|m| m.mean)),
                cell(g.macro_auroc.map(|m| m.std)),
                cell(g.macro_auprc.map(|m| m.mean)),
                cell(g.macro_auprc.map(|m| m.std)),
            ])
            .map_err(csv_err)?;
        }
    }
    into_string(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(sex: Sex, age: u32, race: Race) -> Demographics {
        Demographics {
            sex,
            age_years: age,
            race,
        }
    }

    fn report(macro_auroc: f64) -> MetricReport {
        MetricReport {
            labels: vec!["a".into()],
            n_samples: 4,
            per_label: vec![LabelMetric {
                label: "a".into(),
                n: 4,
                positives: 2,
                auroc: Some(macro_auroc),
                auprc: Some(0.5),
            }],
            macro_auroc: Some(macro_auroc),
            macro_auprc: Some(0.5),
            skipped_auroc: 0,
            skipped_auprc: 0,
            subgroups: Vec::new(),
        }
    }

    #[test]
    fn age_bins_are_left_closed() {
        assert_eq!(AgeBin::of(39), AgeBin::Under40);
        assert_eq!(AgeBin::of(40), AgeBin::From40To60);
        assert_eq!(AgeBin::of(60), AgeBin::From60To80);
        assert_eq!(AgeBin::of(80), AgeBin::Over80);
    }

    #[test]
    fn macro_skips_single_class_labels() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3], vec![0.8, 0.5]];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let r = evaluate(&labels, &scores, &targets, None).unwrap();
        assert_eq!(r.per_label[0].auroc, Some(1.0));
        assert_eq!(r.per_label[1].auroc, None);
        assert_eq!(r.macro_auroc, Some(1.0));
        assert_eq!((r.skipped_auroc, r.skipped_auprc), (1, 1));
    }

    #[test]
    fn subgroup_cells_partition_each_axis() {
        let labels = vec!["a".to_string()];
        let d = vec![
            demo(Sex::F, 30, Race::White),
            demo(Sex::M, 45, Race::White),
            demo(Sex::F, 70, Race::Black),
            demo(Sex::M, 85, Race::Asian),
            demo(Sex::F, 50, Race::White),
        ];
        let scores: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let targets = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0], vec![1.0]];
        let cells = subgroup_metrics(&labels, &d, &scores, &targets).unwrap();
        assert_eq!(cells.len(), 2 + 4 + 4);
        for axis in SubgroupAxis::ALL {
            let total: usize = cells.iter().filter(|c| c.axis == axis).map(|c| c.n).sum();
            assert_eq!(total, 5);
        }
        let other = cells.iter().find(|c| c.group == "Other").unwrap();
        assert_eq!((other.n, other.macro_auroc), (0, None));
        let black = cells.iter().find(|c| c.group == "Black").unwrap();
        assert_eq!((black.n, black.macro_auroc, black.labels_defined), (1, None, 0));
        let female = cells.iter().find(|c| c.group == "F").unwrap();
        assert_eq!(female.macro_auroc, Some(1.0));
    }

    #[test]
    fn two_seed_aggregate() {
        let agg = seed_aggregate(&[report(0.70), report(0.72)], None).unwrap();
        let m = agg.macro_auroc.unwrap();
        assert!((m.mean - 0.71).abs() < 1e-12);
        assert!((m.std - 0.014142135623730963).abs() < 1e-12);
        let same = seed_aggregate(&[report(0.7), report(0.7), report(0.7)], None).unwrap();
        assert_eq!(same.macro_auroc.unwrap().std, 0.0);
    }

    #[test]
    fn aggregate_is_order_free() {
        let vals = [0.61, 0.73, 0.52, 0.9, 0.66];
        let a: Vec<MetricReport> = vals.iter().map(|&v| report(v)).collect();
        let mut b = a.clone();
        b.reverse();
        b.swap(0, 2);
        assert_eq!(seed_aggregate(&a, None).unwrap(), seed_aggregate(&b, None).unwrap());
    }

    #[test]
    fn baseline_comparison_and_label_mismatch() {
        let ours: Vec<MetricReport> = [0.80, 0.81, 0.82].iter().map(|&v| report(v)).collect();
        let base: Vec<MetricReport> = [0.70, 0.71, 0.72].iter().map(|&v| report(v)).collect();
        let agg = seed_aggregate(&ours, Some(&base)).unwrap();
        assert_eq!(agg.vs_baseline.unwrap().macro_auroc, Some(0.05));
        let mut odd = report(0.5);
        odd.labels = vec!["z".into()];
        assert!(matches!(seed_aggregate(&[report(0.5), odd], None), Err(Error::Contract(_))));
    }

    #[test]
    fn tables_have_one_row_per_label_and_model() {
        let agg = seed_aggregate(&[report(0.7), report(0.72)], None).unwrap();
        let t = label_table(&[("hist", &agg), ("base", &agg)], b',').unwrap();
        assert_eq!(t.lines().count(), 1 + 2 * 2);
        assert!(t.starts_with("label,model,auroc,auprc"));
        assert!(t.contains("a,hist,0.710000,0.500000"));
    }
}
