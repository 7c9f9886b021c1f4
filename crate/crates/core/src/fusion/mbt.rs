//! Bottleneck fusion: per-modality transformers that only exchange
//! information through a small set of shared fusion tokens.

use crate::encoder::{EncoderConfig, PositionalEncoder, TokenMeta, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Forward, LayerNorm, ParamBuilder, ParamId};
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct MbtBranch {
    pub cls: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub positional: PositionalEncoder,
}

#[derive(Clone, Debug)]
pub struct Mbt {
    pub branches: [MbtBranch; 2],
    pub fusion_tokens: ParamId,
    pub fusion_layers: usize,
    pub final_ln: LayerNorm,
    pub bottleneck: usize,
}

/// Everything a caller might inspect after a forward pass.
pub struct MbtOutput {
    pub joint: Var,
    /// Final per-branch token states (`[CLS]` first).
    pub branch_states: [Var; 2],
    /// Per fusion layer: the two branch proposals and their average.
    pub fusion_updates: Vec<([Var; 2], Var)>,
}

impl Mbt {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        cfg: &EncoderConfig,
        layers: usize,
        fusion_layers: usize,
        bottleneck: usize,
        max_slots: usize,
    ) -> Result<Self> {
        if bottleneck < 1 {
            return Err(Error::config("bottleneck fusion needs at least one fusion token"));
        }
        if fusion_layers > layers {
            return Err(Error::config(format!(
                "{fusion_layers} fusion layers exceed depth {layers}"
            )));
        }
        let d = cfg.model_dim;
        let mut sub = pb.sub("mbt");
        let mut branch = |name: &str| -> Result<MbtBranch> {
            let mut b = sub.sub(name);
            Ok(MbtBranch {
                cls: b.normal("cls", &[1, d], 0.02)?,
                layers: (0..layers)
                    .map(|i| EncoderLayer::new(&mut b, &format!("layer{i}"), d, cfg.heads, cfg.ff_dim))
                    .collect::<Result<_>>()?,
                positional: PositionalEncoder::new(&mut b, &cfg.positional, d, cfg.heads, max_slots)?,
            })
        };
        let branches = [branch("image")?, branch("text")?];
        Ok(Mbt {
            branches,
            fusion_tokens: sub.normal("fusion_tokens", &[bottleneck, d], 0.02)?,
            fusion_layers,
            final_ln: LayerNorm::new(&mut sub, "final_ln", d)?,
            bottleneck,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, image: &TokenSeq, text: &TokenSeq) -> Result<MbtOutput> {
        let depth = self.branches[0].layers.len();
        let pre = depth - self.fusion_layers;
        let mut states = Vec::with_capacity(2);
        for (branch, seq) in self.branches.iter().zip([image, text]) {
            let cls = TokenSeq {
                tokens: Some(fwd.p(branch.cls)),
                meta: vec![TokenMeta {
                    valid: true,
                    position: 0.0,
                    slot: 0,
                }],
            };
            let joined = TokenSeq::concat(fwd, &[&cls, seq])?;
            states.push(branch.positional.add(fwd, joined)?);
        }
        let fusion_meta = vec![
            TokenMeta {
                valid: true,
                position: 0.0,
                slot: 0,
            };
            self.bottleneck
        ];
        let mut x: Vec<Var> = states.iter().map(|s| s.tokens.expect("cls present")).collect();
        let mut z = fwd.p(self.fusion_tokens);
        let mut fusion_updates = Vec::new();
        for l in 0..depth {
            if l < pre {
                for (i, branch) in self.branches.iter().enumerate() {
                    let mask = states[i].mask();
                    let rot = branch.positional.rotary(&states[i].meta, &states[i].meta)?;
                    x[i] = branch.layers[l].forward(fwd, x[i], &mask, rot.as_ref())?;
                }
                continue;
            }
            let mut proposals = [z, z];
            for (i, branch) in self.branches.iter().enumerate() {
                let n = states[i].len();
                let inp = fwd.tape.concat_rows(&[x[i], z])?;
                let mut meta = states[i].meta.clone();
                meta.extend_from_slice(&fusion_meta);
                let mask: Vec<bool> = meta.iter().map(|m| m.valid).collect();
                let rot = branch.positional.rotary(&meta, &meta)?;
                let y = branch.layers[l].forward(fwd, inp, &mask, rot.as_ref())?;
                x[i] = fwd.tape.slice_rows(y, 0, n)?;
                proposals[i] = fwd.tape.slice_rows(y, n, self.bottleneck)?;
            }
            let sum = fwd.tape.add(proposals[0], proposals[1])?;
            z = fwd.tape.scale(sum, 0.5)?;
            fusion_updates.push((proposals, z));
        }
        let rows: Vec<usize> = (0..self.bottleneck).collect();
        let pooled = fwd.tape.mean_rows(z, &rows)?;
        let joint = self.final_ln.forward(fwd, pooled)?;
        Ok(MbtOutput {
            joint,
            branch_states: [x[0], x[1]],
            fusion_updates,
        })
    }
}
