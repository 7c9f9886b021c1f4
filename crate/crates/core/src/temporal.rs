//! Time offsets and positional signals.
//!
//! Offsets are hours before the anchor study. They are min-max normalized per
//! sample and then used as continuous positions by one of four modes: none,
//! additive sine-cosine, additive learned table, or rotary (applied to query
//! and key projections inside attention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max normalize to `[0, 1]`. An all-equal input maps to all zeros.
pub fn normalize_offsets(offsets: &[f64]) -> Result<Vec<f64>> {
    if offsets.is_empty() {
        return Err(Error::contract("normalize_offsets on an empty list"));
    }
    if offsets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("normalize_offsets"));
    }
    let min = offsets.iter().copied().fold(f64::INFINITY, f64::min);
    let max = offsets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![0.0; offsets.len()]);
    }
    Ok(offsets.iter().map(|t| (t - min) / span).collect())
}

/// Offsets of a history, stored oldest first (so non-increasing toward 0).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeOffsetSeries {
    offsets: Vec<f64>,
}

impl TimeOffsetSeries {
    pub fn new(offsets: Vec<f64>) -> Result<Self> {
        if offsets.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::contract("time offsets must be finite and non-negative"));
        }
        if offsets.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::contract("time offsets must be stored oldest first"));
        }
        Ok(TimeOffsetSeries { offsets })
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn normalized(&self) -> Result<Vec<f64>> {
        normalize_offsets(&self.offsets)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    None,
    Sincos,
    Learnable,
    #[default]
    Rope,
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sincos" => Ok(Self::Sincos),
            "learnable" => Ok(Self::Learnable),
            "rope" => Ok(Self::Rope),
            other => Err(Error::config(format!("unknown positional mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionalConfig {
    pub mode: PositionalMode,
    pub rope_base: f64,
    /// Multiplier turning a normalized offset into a position.
    pub position_scale: f64,
}

impl Default for PositionalConfig {
    fn default() -> Self {
        PositionalConfig {
            mode: PositionalMode::Rope,
            rope_base: 10_000.0,
            position_scale: 49.0,
        }
    }
}

fn require_even(d: usize, what: &str) -> Result<()> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!("{what} needs an even dimension, got {d}")));
    }
    Ok(())
}

/// Cosines and sines of `θ_j · p` for every position and pair `j < d/2`,
/// with `θ_j = base^(−2j/d)`. Laid out `[positions × d/2]`.
pub fn rotation_tables(positions: &[f64], d: usize, base: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    require_even(d, "rotary encoding")?;
    if positions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("rotation_tables"));
    }
    let half = d / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for j in 0..half {
            let theta = base.powf(-2.0 * j as f64 / d as f64);
            let (s, c) = (theta * p).sin_cos();
            cos.push(c);
            sin.push(s);
        }
    }
    Ok((cos, sin))
}

/// Rotate each `(2j, 2j+1)` pair of row `r` by `θ_j · positions[r] · scale`.
pub fn rope_apply(x: &Tensor, positions: &[f64], base: f64, scale: f64) -> Result<Tensor> {
    let d = x.cols();
    require_even(d, "rope_apply")?;
    if positions.len() != x.rows() {
        return Err(Error::Shape {
            op: "rope_apply",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let scaled: Vec<f64> = positions.iter().map(|p| p * scale).collect();
    let (cos, sin) = rotation_tables(&scaled, d, base)?;
    let half = d / 2;
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        for j in 0..half {
            let (c, s) = (cos[r * half + j], sin[r * half + j]);
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * c - b * s;
            row[2 * j + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Interleaved `[sin θ_0 p, cos θ_0 p, sin θ_1 p, cos θ_1 p, …]` rows.
pub fn sincos_table(positions: &[f64], d: usize, base: f64) -> Result<Tensor> {
    let (cos, sin) = rotation_tables(positions, d, base)?;
    let half = d / 2;
    let mut data = Vec::with_capacity(positions.len() * d);
    for r in 0..positions.len() {
        for j in 0..half {
            data.push(sin[r * half + j]);
            data.push(cos[r * half + j]);
        }
    }
    Tensor::matrix(positions.len(), d, data)
}

/// Apply a positional mode to a `K × d` token matrix.
///
/// Rotary mode returns the tokens unchanged: rotation happens to queries and
/// keys inside attention, never to the token stream or to values.
pub fn positional_apply(
    cfg: &PositionalConfig,
    seq: &Tensor,
    positions: &[f64],
    learned_table: Option<&Tensor>,
) -> Result<Tensor> {
    let (k, d) = (seq.rows(), seq.cols());
    if positions.len() != k {
        return Err(Error::Shape {
            op: "positional_apply",
            lhs: seq.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    match cfg.mode {
        PositionalMode::None | PositionalMode::Rope => {
            if cfg.mode == PositionalMode::Rope {
                require_even(d, "rope")?;
            }
            Ok(seq.clone())
        }
        PositionalMode::Sincos => {
            let scaled: Vec<f64> = positions.iter().map(|p| p * cfg.position_scale).collect();
            let table = sincos_table(&scaled, d, cfg.rope_base)?;
            let mut out = seq.clone();
            for (o, t) in out.data_mut().iter_mut().zip(table.data()) {
                *o += t;
            }
            Ok(out)
        }
        PositionalMode::Learnable => {
            let table = learned_table
                .ok_or_else(|| Error::config("learnable positional mode needs a learned table"))?;
            if table.cols() != d || table.rows() < k {
                return Err(Error::config(format!(
                    "learned table {:?} cannot cover {k} slots of width {d}",
                    table.shape()
                )));
            }
            let mut out = seq.clone();
            for (o, t) in out.data_mut().iter_mut().zip(table.data()) {
                *o += t;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_offsets(&[0.0, 5.0, 10.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_offsets(&[7.0]).unwrap(), vec![0.0]);
        assert_eq!(normalize_offsets(&[3.0, 3.0, 9.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(normalize_offsets(&[]), Err(Error::Contract(_))));
        assert!(matches!(
            normalize_offsets(&[1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn normalize_is_idempotent_on_unit_range() {
        let x = [0.0, 0.25, 1.0, 0.6];
        assert_eq!(normalize_offsets(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn offset_series_ordering() {
        assert!(TimeOffsetSeries::new(vec![30.0, 10.0, 2.0]).is_ok());
        assert!(TimeOffsetSeries::new(vec![2.0, 10.0]).is_err());
        assert!(TimeOffsetSeries::new(vec![-1.0]).is_err());
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let x = Tensor::matrix(1, 4, vec![0.3, -0.7, 1.1, 2.0]).unwrap();
        assert_eq!(rope_apply(&x, &[0.0], 10_000.0, 49.0).unwrap(), x);
    }

    #[test]
    fn rope_quarter_turn() {
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let y = rope_apply(&x, &[PI / 2.0], 10_000.0, 1.0).unwrap();
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_rejects_odd_width() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(rope_apply(&x, &[0.0], 1e4, 1.0), Err(Error::Config(_))));
        assert!(matches!(sincos_table(&[0.0], 3, 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn sincos_rows() {
        let t = sincos_table(&[0.0, 2.5, 2.5], 6, 10_000.0).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.row(1), t.row(2));
        for r in 0..3 {
            for pair in t.row(r).chunks(2) {
                assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_apply_modes() {
        let seq = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let pos = [0.0, 0.5];
        let none = PositionalConfig {
            mode: PositionalMode::None,
            ..Default::default()
        };
        assert_eq!(positional_apply(&none, &seq, &pos, None).unwrap(), seq);

        let sincos = PositionalConfig {
            mode: PositionalMode::Sincos,
            ..Default::default()
        };
        let zeros = Tensor::zeros(&[2, 4]);
        let expected = sincos_table(&[0.0, 0.5 * 49.0], 4, 10_000.0).unwrap();
        assert_eq!(positional_apply(&sincos, &zeros, &pos, None).unwrap(), expected);

        let learnable = PositionalConfig {
            mode: PositionalMode::Learnable,
            ..Default::default()
        };
        assert!(matches!(
            positional_apply(&learnable, &seq, &pos, None),
            Err(Error::Config(_))
        ));
        let table = Tensor::full(&[5, 4], 1.0);
        let out = positional_apply(&learnable, &seq, &pos, Some(&table)).unwrap();
        assert!((out.at(1, 3) - 1.8).abs() < 1e-15);
    }
}
