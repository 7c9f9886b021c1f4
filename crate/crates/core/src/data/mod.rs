//! Cohort construction: table ingestion, the image/report join, sample
//! building, filtering, patient-level splits, the embedding store and a
//! synthetic cohort generator.

mod prepare;
mod records;
mod samples;
mod store;
mod synth;

pub use prepare::{missing_keys, prepare_input, InputOptions};
pub use records::{
    compose_report_text, merge_records, read_images, read_reports, report_label_columns, text_key, write_images, write_reports,
    Demographics, ImageRow, LabelValue, MergeStats, Race, ReportRow, SectionMode, Sections, Sex, StudyRecord,
};
pub use samples::{
    build_samples, check_leakage, dedup_filter, read_manifest, split_patients, write_manifest, BuildStats,
    CohortSplit, FilterStats, HistoryImage, HistoryReport, Split, TemporalSample, SECONDS_PER_HOUR,
};
pub use store::{EmbeddingStore, StoredEmbedding, STORE_HEADER_LEN, STORE_MAGIC};
pub use synth::{default_labels, synth_cohort, SignalMode, SyntheticCohort, SyntheticSpec, DEFAULT_LABELS};
