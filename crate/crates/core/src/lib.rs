//! Temporal multi-modal diagnosis: an f64 autodiff engine, a time-series
//! transformer over stored embeddings, fusion heads, a longitudinal cohort
//! pipeline, training and rank-based evaluation.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use encoder::{assemble_sequence, mean_pool, EmbeddingSequence, EncoderConfig, Modality, Pooling};
pub use data::{EmbeddingStore, SectionMode, SignalMode, SyntheticSpec, TemporalSample};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionMethod};
pub use metrics::{MetricReport, SeedAggregate};
pub use model::{FlopCount, HistAid, ModelConfig, SampleInput};
pub use temporal::{normalize_offsets, PositionalConfig, PositionalMode};
pub use tensor::{Tape, Tensor, Var};
pub use train::{fit, Checkpoint, Example, TrainConfig};
