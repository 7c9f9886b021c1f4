//! Samples plus stored embeddings to model inputs.

use serde::{Deserialize, Serialize};

use super::samples::TemporalSample;
use super::store::EmbeddingStore;
use crate::encoder::{assemble_sequence, Modality};
use crate::error::{Error, Result};
use crate::model::SampleInput;
use crate::temporal::normalize_offsets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputOptions {
    pub k_img: usize,
    pub k_text: usize,
    /// Keep at most this many of the most recent reports.
    pub num_reports: Option<usize>,
    /// Keep only history within this many days of the anchor.
    pub window_days: Option<f64>,
    /// Feed scans at all. Turning it off gives a reports-only input.
    pub current_image: bool,
}

impl Default for InputOptions {
    fn default() -> Self {
        InputOptions {
            k_img: 1,
            k_text: 50,
            num_reports: None,
            window_days: None,
            current_image: true,
        }
    }
}

impl InputOptions {
    pub fn validate(&self) -> Result<()> {
        if self.k_img == 0 || self.k_text == 0 {
            return Err(Error::config("k_img and k_text must be positive"));
        }
        if let Some(w) = self.window_days {
            if !(w > 0.0) {
                return Err(Error::config(format!("time window must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

/// Offsets (hours) of the history items that survive windowing and
/// truncation, oldest first.
fn kept<T>(items: &[T], offset: impl Fn(&T) -> f64, window_h: Option<f64>, limit: usize) -> Vec<&T> {
    let in_window: Vec<&T> = items
        .iter()
        .filter(|i| window_h.is_none_or(|w| offset(i) <= w))
        .collect();
    let skip = in_window.len().saturating_sub(limit);
    in_window[skip..].to_vec()
}

/// Build one model input. Offsets are normalized over the anchor and every
/// history item that is kept.
pub fn prepare_input(sample: &TemporalSample, store: &EmbeddingStore, opts: &InputOptions) -> Result<SampleInput> {
    let window_h = opts.window_days.map(|d| d * 24.0);
    let text_limit = opts.num_reports.unwrap_or(usize::MAX).min(opts.k_text);
    let texts = kept(&sample.history_reports, |r| r.offset_hours, window_h, text_limit);
    let current = sample.image_key.as_ref().filter(|_| opts.current_image);
    let has_current = current.is_some();
    let image_limit = if opts.current_image {
        opts.k_img - usize::from(has_current)
    } else {
        0
    };
    let images = kept(&sample.history_images, |i| i.offset_hours, window_h, image_limit);

    let mut all = vec![0.0];
    all.extend(texts.iter().map(|r| r.offset_hours));
    all.extend(images.iter().map(|i| i.offset_hours));
    let norm = normalize_offsets(&all)?;
    let (text_norm, image_norm) = norm[1..].split_at(texts.len());

    let d = store.dim();
    let text_entries = texts
        .iter()
        .zip(text_norm)
        .map(|(r, &t)| Ok((store.vector(&r.text_key)?, t)))
        .collect::<Result<Vec<_>>>()?;
    let mut image_entries = images
        .iter()
        .zip(image_norm)
        .map(|(i, &t)| Ok((store.vector(&i.image_key)?, t)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(k) = current {
        image_entries.push((store.vector(k)?, 0.0));
    }
    Ok(SampleInput {
        image: assemble_sequence(&image_entries, opts.k_img, d, Modality::Image, None)?,
        text: assemble_sequence(&text_entries, opts.k_text, d, Modality::Text, None)?,
    })
}

/// Every key a sample needs under `opts`, for up-front validation.
pub fn missing_keys(samples: &[TemporalSample], store: &EmbeddingStore) -> Vec<String> {
    let mut out = Vec::new();
    for s in samples {
        let keys = s
            .image_key
            .iter()
            .chain(s.history_reports.iter().map(|r| &r.text_key))
            .chain(s.history_images.iter().map(|i| &i.image_key));
        for k in keys {
            if !store.contains(k) {
                out.push(k.clone());
            }
        }
    }
    out.sort();
    out.dedup();
    out
}
