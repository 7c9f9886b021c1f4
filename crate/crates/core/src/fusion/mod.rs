//! Modality-combination strategies.

mod mbt;
mod meter;
mod vector;

pub use mbt::{Mbt, MbtBranch, MbtOutput};
pub use meter::{co_attend, Meter, MeterBranch, MeterLayer};
pub use vector::{
    block_values, concat_mlp_values, ensemble_average, fuse_block, fuse_concat_mlp, BlockFusion, ConcatMlp,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    Vilt,
    Mbt,
    ConcatMlp,
    Block,
    Meter,
    Ensemble,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 6] = [
        FusionMethod::Vilt,
        FusionMethod::Mbt,
        FusionMethod::ConcatMlp,
        FusionMethod::Block,
        FusionMethod::Meter,
        FusionMethod::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Vilt => "vilt",
            FusionMethod::Mbt => "mbt",
            FusionMethod::ConcatMlp => "concat_mlp",
            FusionMethod::Block => "block",
            FusionMethod::Meter => "meter",
            FusionMethod::Ensemble => "ensemble",
        }
    }

    /// Whether the method consumes token sequences rather than pooled vectors.
    pub fn is_sequence_level(self) -> bool {
        matches!(self, FusionMethod::Vilt | FusionMethod::Mbt | FusionMethod::Meter)
    }
}

impl std::fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown fusion method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub vilt_layers: usize,
    pub mbt_layers: usize,
    pub mbt_fusion_layers: usize,
    pub mbt_bottleneck: usize,
    pub meter_layers: usize,
    /// Hidden width of the concatenation MLP; `None` means `I + J`.
    pub concat_hidden: Option<usize>,
    /// `(L, M, N)` of the block core.
    pub block_dims: (usize, usize, usize),
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::Vilt,
            vilt_layers: 1,
            mbt_layers: 6,
            mbt_fusion_layers: 3,
            mbt_bottleneck: 4,
            meter_layers: 2,
            concat_hidden: None,
            block_dims: (8, 8, 8),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mbt_bottleneck < 1 {
            return Err(Error::config("mbt_bottleneck must be at least 1"));
        }
        if self.mbt_fusion_layers > self.mbt_layers {
            return Err(Error::config("mbt_fusion_layers exceeds mbt_layers"));
        }
        let (l, m, n) = self.block_dims;
        if l == 0 || m == 0 || n == 0 || self.concat_hidden == Some(0) {
            return Err(Error::config("fusion widths must be positive"));
        }
        Ok(())
    }
}
