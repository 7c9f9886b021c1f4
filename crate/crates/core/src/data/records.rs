//! Study tables and the image/report join.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Asian,
    Other,
}

impl std::str::FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "F" => Ok(Sex::F),
            "M" => Ok(Sex::M),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

impl std::str::FromStr for Race {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "White" => Ok(Race::White),
            "Black" => Ok(Race::Black),
            "Asian" => Ok(Race::Asian),
            "Other" => Ok(Race::Other),
            other => Err(format!("unknown race `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    pub age_years: u32,
    pub race: Race,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelValue {
    Positive,
    Negative,
    Uncertain,
    Missing,
}

impl LabelValue {
    /// U-zeros: only positives map to 1.
    pub fn binarize(self) -> f64 {
        if self == LabelValue::Positive {
            1.0
        } else {
            0.0
        }
    }

    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "1" | "1.0" => Ok(LabelValue::Positive),
            "0" | "0.0" => Ok(LabelValue::Negative),
            "-1" | "-1.0" => Ok(LabelValue::Uncertain),
            "" => Ok(LabelValue::Missing),
            other => Err(format!("label value `{other}` is not one of 1, 0, -1 or empty")),
        }
    }

    fn code(self) -> &'static str {
        match self {
            LabelValue::Positive => "1",
            LabelValue::Negative => "0",
            LabelValue::Uncertain => "-1",
            LabelValue::Missing => "",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sections {
    pub history: Option<String>,
    pub indication: Option<String>,
    pub comparison: Option<String>,
    pub findings: Option<String>,
    pub impression: Option<String>,
}

fn present(s: &Option<String>) -> bool {
    s.as_deref().is_some_and(|t| !t.trim().is_empty())
}

impl Sections {
    pub fn has_impression(&self) -> bool {
        present(&self.impression)
    }

    pub fn has_findings(&self) -> bool {
        present(&self.findings)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionMode {
    #[default]
    Impression,
    Finding,
    Both,
}

impl SectionMode {
    pub const ALL: [SectionMode; 3] = [SectionMode::Impression, SectionMode::Finding, SectionMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            SectionMode::Impression => "impression",
            SectionMode::Finding => "finding",
            SectionMode::Both => "both",
        }
    }
}

impl std::str::FromStr for SectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SectionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown section mode `{s}`")))
    }
}

/// Report text fed to the text encoder, or `None` when a required section is
/// missing.
pub fn compose_report_text(sections: &Sections, mode: SectionMode) -> Option<String> {
    let imp = sections.impression.as_deref().filter(|_| sections.has_impression());
    let fnd = sections.findings.as_deref().filter(|_| sections.has_findings());
    match mode {
        SectionMode::Impression => imp.map(str::to_string),
        SectionMode::Finding => fnd.map(str::to_string),
        SectionMode::Both => Some(format!("Impression: {} Finding: {}", imp?, fnd?)),
    }
}

/// Store key of a study's report text under a section mode.
pub fn text_key(study_id: &str, mode: SectionMode) -> String {
    format!("{study_id}/{}", mode.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub subject_id: String,
    pub study_id: String,
    /// Epoch seconds.
    pub chart_time: i64,
    pub image_embedding_key: Option<String>,
    pub sections: Sections,
    pub labels: Vec<LabelValue>,
    pub demographics: Demographics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRow {
    pub subject_id: String,
    pub study_id: String,
    pub chart_time: i64,
    pub image_embedding_key: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub subject_id: String,
    pub study_id: String,
    pub chart_time: i64,
    pub demographics: Demographics,
    pub sections: Sections,
    pub labels: Vec<LabelValue>,
}

const SECTION_COLUMNS: [&str; 5] = ["history", "indication", "comparison", "findings", "impression"];

fn reader<R: Read>(input: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

fn columns(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim() == *w)
                .ok_or_else(|| Error::config(format!("missing column `{w}`")))
        })
        .collect()
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

fn parse_time(s: &str, line: usize) -> Result<i64> {
    let t: i64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("chart_time `{s}` is not an integer"),
    })?;
    if t <= 0 {
        return Err(Error::Parse {
            line,
            msg: format!("chart_time {t} must be positive"),
        });
    }
    Ok(t)
}

fn nonempty(s: &str, what: &str, line: usize) -> Result<String> {
    let t = s.trim();
    if t.is_empty() {
        return Err(Error::Parse {
            line,
            msg: format!("empty {what}"),
        });
    }
    Ok(t.to_string())
}

pub fn read_images<R: Read>(input: R, delimiter: u8) -> Result<Vec<ImageRow>> {
    let mut rdr = reader(input, delimiter);
    let cols = columns(
        rdr.headers().map_err(csv_err)?,
        &["subject_id", "study_id", "chart_time", "image_embedding_key"],
    )?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        let key = rec[cols[3]].trim();
        out.push(ImageRow {
            subject_id: nonempty(&rec[cols[0]], "subject_id", line)?,
            study_id: nonempty(&rec[cols[1]], "study_id", line)?,
            chart_time: parse_time(&rec[cols[2]], line)?,
            image_embedding_key: (!key.is_empty()).then(|| key.to_string()),
        });
    }
    Ok(out)
}

pub fn read_reports<R: Read>(input: R, delimiter: u8, labels: &[String]) -> Result<Vec<ReportRow>> {
    let mut rdr = reader(input, delimiter);
    let mut wanted = vec!["subject_id", "study_id", "chart_time", "sex", "age_years", "race"];
    wanted.extend(SECTION_COLUMNS);
    wanted.extend(labels.iter().map(String::as_str));
    let cols = columns(rdr.headers().map_err(csv_err)?, &wanted)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = line_of(&rec);
        let field = |i: usize| &rec[cols[i]];
        let perr = |msg: String| Error::Parse { line, msg };
        let section = |i: usize| {
            let s = field(6 + i);
            (!s.is_empty()).then(|| s.to_string())
        };
        let demographics = Demographics {
            sex: field(3).parse().map_err(perr)?,
            age_years: field(4)
                .trim()
                .parse()
                .map_err(|_| perr(format!("age_years `{}` is not a whole number", field(4))))?,
            race: field(5).parse().map_err(perr)?,
        };
        let labels = (0..labels.len())
            .map(|i| LabelValue::parse(field(11 + i)).map_err(perr))
            .collect::<Result<Vec<_>>>()?;
        out.push(ReportRow {
            subject_id: nonempty(field(0), "subject_id", line)?,
            study_id: nonempty(field(1), "study_id", line)?,
            chart_time: parse_time(field(2), line)?,
            demographics,
            sections: Sections {
                history: section(0),
                indication: section(1),
                comparison: section(2),
                findings: section(3),
                impression: section(4),
            },
            labels,
        });
    }
    Ok(out)
}

/// Label columns of a report table: every header after the fixed ones, in
/// file order.
pub fn report_label_columns<R: Read>(input: R, delimiter: u8) -> Result<Vec<String>> {
    let mut rdr = reader(input, delimiter);
    let headers = rdr.headers().map_err(csv_err)?;
    let fixed = ["subject_id", "study_id", "chart_time", "sex", "age_years", "race"];
    Ok(headers
        .iter()
        .map(str::trim)
        .filter(|h| !fixed.contains(h) && !SECTION_COLUMNS.contains(h))
        .map(String::from)
        .collect())
}

pub fn write_images<W: Write>(out: W, rows: &[ImageRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["subject_id", "study_id", "chart_time", "image_embedding_key"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.subject_id.as_str(),
            r.study_id.as_str(),
            &r.chart_time.to_string(),
            r.image_embedding_key.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports<W: Write>(out: W, rows: &[ReportRow], labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["subject_id", "study_id", "chart_time", "sex", "age_years", "race"];
    header.extend(SECTION_COLUMNS);
    header.extend(labels.iter().map(String::as_str));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let s = &r.sections;
        let mut rec = vec![
            r.subject_id.clone(),
            r.study_id.clone(),
            r.chart_time.to_string(),
            format!("{:?}", r.demographics.sex),
            r.demographics.age_years.to_string(),
            format!("{:?}", r.demographics.race),
        ];
        for sec in [&s.history, &s.indication, &s.comparison, &s.findings, &s.impression] {
            rec.push(sec.clone().unwrap_or_default());
        }
        rec.extend(r.labels.iter().map(|l| l.code().to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeStats {
    pub image_rows: usize,
    pub report_rows: usize,
    pub records: usize,
    pub unmatched_images: usize,
    pub unmatched_reports: usize,
}

/// Inner join on `(subject_id, study_id)`. Every image row pairs with every
/// report row of the same study, so duplicates survive until deduplication.
/// The image row's chart time is kept.
pub fn merge_records(images: &[ImageRow], reports: &[ReportRow]) -> (Vec<StudyRecord>, MergeStats) {
    let mut by_key: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, r) in reports.iter().enumerate() {
        by_key.entry((&r.subject_id, &r.study_id)).or_default().push(i);
    }
    let mut matched = vec![false; reports.len()];
    let mut records = Vec::new();
    let mut unmatched_images = 0;
    for img in images {
        let Some(idx) = by_key.get(&(img.subject_id.as_str(), img.study_id.as_str())) else {
            unmatched_images += 1;
            continue;
        };
        for &i in idx {
            matched[i] = true;
            let r = &reports[i];
            records.push(StudyRecord {
                subject_id: img.subject_id.clone(),
                study_id: img.study_id.clone(),
                chart_time: img.chart_time,
                image_embedding_key: img.image_embedding_key.clone(),
                sections: r.sections.clone(),
                labels: r.labels.clone(),
                demographics: r.demographics,
            });
        }
    }
    let stats = MergeStats {
        image_rows: images.len(),
        report_rows: reports.len(),
        records: records.len(),
        unmatched_images,
        unmatched_reports: matched.iter().filter(|m| !**m).count(),
    };
    (records, stats)
}
