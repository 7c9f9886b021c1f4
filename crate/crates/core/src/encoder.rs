//! Fixed-length embedding sequences and the time-series transformer that
//! pools them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, ParamBuilder, ParamId, Rotary, Stack};
use crate::temporal::{PositionalConfig, PositionalMode};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// `K × D` slots, most recent first. Slots past the valid prefix are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub data: Tensor,
    pub valid: Vec<bool>,
    pub offsets_norm: Vec<f64>,
    pub modality: Modality,
}

impl EmbeddingSequence {
    pub fn capacity(&self) -> usize {
        self.valid.len()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Build a `K`-slot sequence from `(embedding, normalized offset)` entries
/// given oldest first. The most recent `K` are kept and placed newest first;
/// `token`, when given, is added to every valid slot.
pub fn assemble_sequence(
    entries: &[(Vec<f64>, f64)],
    k: usize,
    dim: usize,
    modality: Modality,
    token: Option<&[f64]>,
) -> Result<EmbeddingSequence> {
    if k == 0 || dim == 0 {
        return Err(Error::config("sequence capacity and width must be positive"));
    }
    if let Some(t) = token {
        if t.len() != dim {
            return Err(Error::Shape {
                op: "assemble_sequence",
                lhs: vec![dim],
                rhs: vec![t.len()],
            });
        }
    }
    let mut data = vec![0.0; k * dim];
    let mut valid = vec![false; k];
    let mut offsets = vec![0.0; k];
    for (slot, (vec, off)) in entries.iter().rev().take(k).enumerate() {
        if vec.len() != dim {
            return Err(Error::Shape {
                op: "assemble_sequence",
                lhs: vec![dim],
                rhs: vec![vec.len()],
            });
        }
        if !(0.0..=1.0).contains(off) {
            return Err(Error::contract(format!("normalized offset {off} outside [0, 1]")));
        }
        let row = &mut data[slot * dim..(slot + 1) * dim];
        row.copy_from_slice(vec);
        if let Some(t) = token {
            row.iter_mut().zip(t).for_each(|(r, t)| *r += t);
        }
        valid[slot] = true;
        offsets[slot] = *off;
    }
    Ok(EmbeddingSequence {
        data: Tensor::matrix(k, dim, data)?,
        valid,
        offsets_norm: offsets,
        modality,
    })
}

/// Mean over valid slots; the zero vector when none are valid.
pub fn mean_pool(seq: &EmbeddingSequence) -> Vec<f64> {
    let d = seq.dim();
    let mut out = vec![0.0; d];
    let n = seq.valid_count();
    if n == 0 {
        return out;
    }
    for (i, _) in seq.valid.iter().enumerate().filter(|(_, v)| **v) {
        out.iter_mut().zip(seq.data.row(i)).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Tst,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tst" => Ok(Self::Tst),
            "mean" => Ok(Self::Mean),
            other => Err(Error::config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub positional: PositionalConfig,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 256,
            dropout: 0.1,
            positional: PositionalConfig::default(),
            pooling: Pooling::Tst,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        let head_dim = self.model_dim / self.heads;
        if matches!(self.positional.mode, PositionalMode::Rope) && !head_dim.is_multiple_of(2) {
            return Err(Error::config(format!("rope needs an even head dim, got {head_dim}")));
        }
        if matches!(self.positional.mode, PositionalMode::Sincos) && !self.model_dim.is_multiple_of(2) {
            return Err(Error::config("sine-cosine encoding needs an even model_dim"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenMeta {
    pub valid: bool,
    /// Normalized offset, before scaling.
    pub position: f64,
    /// Row of the learned positional table this token reads.
    pub slot: usize,
}

/// Tokens living on a tape plus per-row metadata. `tokens` is `None` only
/// when the sequence has no rows at all.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub tokens: Option<Var>,
    pub meta: Vec<TokenMeta>,
}

impl TokenSeq {
    pub fn empty() -> Self {
        TokenSeq {
            tokens: None,
            meta: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.meta.iter().map(|m| m.valid).collect()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.meta.iter().map(|m| m.position).collect()
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.valid)
            .map(|(i, _)| i)
            .collect()
    }

    /// Raw sequence values as constants (no adapter, no modality token).
    /// With `compact`, invalid slots are dropped instead of carried masked.
    pub fn constant(fwd: &mut Forward<'_>, seq: &EmbeddingSequence, slot_base: usize, compact: bool) -> Result<Self> {
        let (rows, meta) = select_rows(seq, slot_base, compact);
        if rows.is_empty() {
            return Ok(Self::empty());
        }
        let t = gather(seq, &rows)?;
        Ok(TokenSeq {
            tokens: Some(fwd.constant(t)),
            meta,
        })
    }

    /// Project stored embeddings through `adapter`, add the modality `token`
    /// to every row and re-zero invalid rows.
    pub fn embed(
        fwd: &mut Forward<'_>,
        seq: &EmbeddingSequence,
        adapter: &Linear,
        token: ParamId,
        slot_base: usize,
        compact: bool,
    ) -> Result<Self> {
        let (rows, meta) = select_rows(seq, slot_base, compact);
        if rows.is_empty() {
            return Ok(Self::empty());
        }
        let raw = fwd.constant(gather(seq, &rows)?);
        let x = adapter.forward(fwd, raw)?;
        let tok = fwd.p(token);
        let mut x = fwd.tape.add_row(x, tok)?;
        let keep: Vec<bool> = meta.iter().map(|m| m.valid).collect();
        if keep.iter().any(|k| !k) {
            x = fwd.tape.mask_rows(x, &keep)?;
        }
        Ok(TokenSeq {
            tokens: Some(x),
            meta,
        })
    }

    pub fn concat(fwd: &mut Forward<'_>, parts: &[&TokenSeq]) -> Result<Self> {
        let vars: Vec<Var> = parts.iter().filter_map(|p| p.tokens).collect();
        let meta = parts.iter().flat_map(|p| p.meta.iter().copied()).collect();
        let tokens = match vars.len() {
            0 => None,
            1 => Some(vars[0]),
            _ => Some(fwd.tape.concat_rows(&vars)?),
        };
        Ok(TokenSeq { tokens, meta })
    }

    /// Mean over valid rows, or zeros of width `d` when there are none.
    pub fn mean_pool(&self, fwd: &mut Forward<'_>, d: usize) -> Result<Var> {
        let rows = self.valid_rows();
        match self.tokens {
            Some(t) if !rows.is_empty() => fwd.tape.mean_rows(t, &rows),
            _ => Ok(fwd.constant(Tensor::zeros(&[1, d]))),
        }
    }

    /// Collapse to a single pooled token (valid iff any row was valid).
    pub fn pooled(&self, fwd: &mut Forward<'_>, d: usize, slot: usize) -> Result<Self> {
        let any = self.meta.iter().any(|m| m.valid);
        let v = self.mean_pool(fwd, d)?;
        Ok(TokenSeq {
            tokens: Some(v),
            meta: vec![TokenMeta {
                valid: any,
                position: 0.0,
                slot,
            }],
        })
    }
}

fn select_rows(seq: &EmbeddingSequence, slot_base: usize, compact: bool) -> (Vec<usize>, Vec<TokenMeta>) {
    seq.valid
        .iter()
        .enumerate()
        .filter(|(_, v)| !compact || **v)
        .map(|(i, &v)| {
            (
                i,
                TokenMeta {
                    valid: v,
                    position: seq.offsets_norm[i],
                    slot: slot_base + i,
                },
            )
        })
        .unzip()
}

fn gather(seq: &EmbeddingSequence, rows: &[usize]) -> Result<Tensor> {
    let d = seq.dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if seq.valid[r] {
            data.extend_from_slice(seq.data.row(r));
        } else {
            data.extend(std::iter::repeat_n(0.0, d));
        }
    }
    Tensor::matrix(rows.len(), d, data)
}

/// Positional signal for one transformer: additive tables for sine-cosine and
/// learned modes, rotary tables for rope.
#[derive(Clone, Debug)]
pub struct PositionalEncoder {
    pub cfg: PositionalConfig,
    pub table: Option<ParamId>,
    pub model_dim: usize,
    pub head_dim: usize,
}

impl PositionalEncoder {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &PositionalConfig,
        model_dim: usize,
        heads: usize,
        max_slots: usize,
    ) -> Result<Self> {
        let table = match cfg.mode {
            PositionalMode::Learnable => Some(pb.normal("pos_table", &[max_slots, model_dim], 0.02)?),
            _ => None,
        };
        Ok(PositionalEncoder {
            cfg: cfg.clone(),
            table,
            model_dim,
            head_dim: model_dim / heads,
        })
    }

    /// Add sine-cosine or learned rows to the valid tokens.
    pub fn add(&self, fwd: &mut Forward<'_>, seq: TokenSeq) -> Result<TokenSeq> {
        let Some(x) = seq.tokens else { return Ok(seq) };
        let d = self.model_dim;
        let n = seq.len();
        let out = match self.cfg.mode {
            PositionalMode::None | PositionalMode::Rope => return Ok(seq),
            PositionalMode::Sincos => {
                let scaled: Vec<f64> = seq
                    .meta
                    .iter()
                    .map(|m| m.position * self.cfg.position_scale)
                    .collect();
                let mut table = crate::temporal::sincos_table(&scaled, d, self.cfg.rope_base)?;
                for (r, m) in seq.meta.iter().enumerate() {
                    if !m.valid {
                        table.data_mut()[r * d..(r + 1) * d].fill(0.0);
                    }
                }
                let c = fwd.constant(table);
                fwd.tape.add(x, c)?
            }
            PositionalMode::Learnable => {
                let id = self
                    .table
                    .ok_or_else(|| Error::config("learnable positional mode needs a table"))?;
                let rows = fwd.params().value(id).rows();
                let mut select = vec![0.0; n * rows];
                for (r, m) in seq.meta.iter().enumerate() {
                    if m.slot >= rows {
                        return Err(Error::config(format!(
                            "slot {} beyond learned table of {rows} rows",
                            m.slot
                        )));
                    }
                    if m.valid {
                        select[r * rows + m.slot] = 1.0;
                    }
                }
                let s = fwd.constant(Tensor::matrix(n, rows, select)?);
                let t = fwd.p(id);
                let picked = fwd.tape.matmul(s, t)?;
                fwd.tape.add(x, picked)?
            }
        };
        Ok(TokenSeq {
            tokens: Some(out),
            meta: seq.meta,
        })
    }

    pub fn rotary(&self, queries: &[TokenMeta], keys: &[TokenMeta]) -> Result<Option<Rotary>> {
        if self.cfg.mode != PositionalMode::Rope {
            return Ok(None);
        }
        let s = self.cfg.position_scale;
        let q: Vec<f64> = queries.iter().map(|m| m.position * s).collect();
        let k: Vec<f64> = keys.iter().map(|m| m.position * s).collect();
        Ok(Some(Rotary::new(&q, &k, self.head_dim, self.cfg.rope_base)?))
    }
}

/// `[CLS]` token, positional signal and a masked transformer stack.
#[derive(Clone, Debug)]
pub struct TstEncoder {
    pub cls: ParamId,
    pub stack: Stack,
    pub positional: PositionalEncoder,
    pub model_dim: usize,
}

impl TstEncoder {
    /// `max_slots` sizes the learned positional table (slot 0 is `[CLS]`).
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &EncoderConfig, depth: usize, max_slots: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(TstEncoder {
            cls: pb.normal("cls", &[1, d], 0.02)?,
            stack: Stack::new(pb, "stack", depth, d, cfg.heads, cfg.ff_dim)?,
            positional: PositionalEncoder::new(pb, &cfg.positional, d, cfg.heads, max_slots)?,
            model_dim: d,
        })
    }

    pub fn cls_token(&self, fwd: &mut Forward<'_>) -> TokenSeq {
        TokenSeq {
            tokens: Some(fwd.p(self.cls)),
            meta: vec![TokenMeta {
                valid: true,
                position: 0.0,
                slot: 0,
            }],
        }
    }

    /// Prepend `[CLS]` to `parts` and encode. Returns the `[CLS]` output
    /// (`1 × d`) and every output row (`(1 + Σ len) × d`).
    pub fn encode(&self, fwd: &mut Forward<'_>, parts: &[&TokenSeq]) -> Result<(Var, Var)> {
        let cls = self.cls_token(fwd);
        let mut all = vec![&cls];
        all.extend_from_slice(parts);
        let seq = TokenSeq::concat(fwd, &all)?;
        let seq = self.positional.add(fwd, seq)?;
        let mask = seq.mask();
        let rotary = self.positional.rotary(&seq.meta, &seq.meta)?;
        let x = seq.tokens.expect("[CLS] is always present");
        let out = self.stack.forward(fwd, x, &mask, rotary.as_ref())?;
        let cls_out = fwd.tape.slice_rows(out, 0, 1)?;
        Ok((cls_out, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries(n: usize, d: usize) -> Vec<(Vec<f64>, f64)> {
        (0..n)
            .map(|i| (vec![i as f64 + 1.0; d], 1.0 - i as f64 / n.max(1) as f64))
            .collect()
    }

    #[test]
    fn padding_rule() {
        let s = assemble_sequence(&entries(3, 4), 50, 4, Modality::Text, None).unwrap();
        assert_eq!(s.valid_count(), 3);
        assert!(s.valid[..3].iter().all(|v| *v));
        for r in 3..50 {
            assert!(s.data.row(r).iter().all(|v| *v == 0.0));
        }
        // newest first
        assert_eq!(s.data.row(0), &[3.0; 4]);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let e = entries(60, 2);
        let s = assemble_sequence(&e, 50, 2, Modality::Text, None).unwrap();
        assert_eq!(s.valid_count(), 50);
        assert_eq!(s.data.row(0), &[60.0, 60.0]);
        assert_eq!(s.data.row(49), &[11.0, 11.0]);
    }

    #[test]
    fn empty_history_is_legal() {
        let s = assemble_sequence(&[], 50, 3, Modality::Text, None).unwrap();
        assert_eq!(s.valid_count(), 0);
        assert!(s.data.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let e = vec![(vec![1.0, 2.0], 0.0)];
        assert!(matches!(
            assemble_sequence(&e, 4, 3, Modality::Image, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn modality_token_added_to_valid_slots_only() {
        let e = vec![(vec![1.0, 2.0], 0.0)];
        let s = assemble_sequence(&e, 3, 2, Modality::Image, Some(&[0.5, -0.5])).unwrap();
        assert_eq!(s.data.row(0), &[1.5, 1.5]);
        assert_eq!(s.data.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn mean_pool_examples() {
        let one = assemble_sequence(&[(vec![2.0, -1.0], 0.0)], 4, 2, Modality::Text, None).unwrap();
        assert_eq!(mean_pool(&one), vec![2.0, -1.0]);
        let two = assemble_sequence(
            &[(vec![1.0, 0.0], 1.0), (vec![3.0, 2.0], 0.0)],
            5,
            2,
            Modality::Text,
            None,
        )
        .unwrap();
        assert_eq!(mean_pool(&two), vec![2.0, 1.0]);
        let none = assemble_sequence(&[], 5, 2, Modality::Text, None).unwrap();
        assert_eq!(mean_pool(&none), vec![0.0, 0.0]);
    }
}
