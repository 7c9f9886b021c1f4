//! Co-attention fusion: two transformer stacks, each layer doing
//! self-attention on its own tokens and then cross-attention into the other
//! modality.

use crate::encoder::{EncoderConfig, PositionalEncoder, TokenMeta, TokenSeq};
use crate::error::Result;
use crate::nn::{Attention, FeedForward, Forward, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct MeterLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl MeterLayer {
    fn new(pb: &mut ParamBuilder<'_>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.model_dim;
        let mut sub = pb.sub(name);
        Ok(MeterLayer {
            ln_self: LayerNorm::new(&mut sub, "ln_self", d)?,
            self_attn: Attention::new(&mut sub, "self_attn", d, cfg.heads)?,
            ln_cross: LayerNorm::new(&mut sub, "ln_cross", d)?,
            cross_attn: Attention::new(&mut sub, "cross_attn", d, cfg.heads)?,
            ln_ff: LayerNorm::new(&mut sub, "ln_ff", d)?,
            ff: FeedForward::new(&mut sub, "ff", d, cfg.ff_dim)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MeterBranch {
    pub cls: ParamId,
    pub layers: Vec<MeterLayer>,
    pub final_ln: LayerNorm,
    pub positional: PositionalEncoder,
}

impl MeterBranch {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        cfg: &EncoderConfig,
        depth: usize,
        max_slots: usize,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let mut sub = pb.sub(name);
        Ok(MeterBranch {
            cls: sub.normal("cls", &[1, d], 0.02)?,
            layers: (0..depth)
                .map(|i| MeterLayer::new(&mut sub, &format!("layer{i}"), cfg))
                .collect::<Result<_>>()?,
            final_ln: LayerNorm::new(&mut sub, "final_ln", d)?,
            positional: PositionalEncoder::new(&mut sub, &cfg.positional, d, cfg.heads, max_slots)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Meter {
    pub branches: [MeterBranch; 2],
    pub head: Linear,
}

impl Meter {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: &EncoderConfig, depth: usize, max_slots: usize) -> Result<Self> {
        let d = cfg.model_dim;
        let mut sub = pb.sub("meter");
        Ok(Meter {
            branches: [
                MeterBranch::new(&mut sub, "image", cfg, depth, max_slots)?,
                MeterBranch::new(&mut sub, "text", cfg, depth, max_slots)?,
            ],
            head: Linear::new(&mut sub, "head", 2 * d, d)?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, image: &TokenSeq, text: &TokenSeq) -> Result<Var> {
        let [a, b] = co_attend(fwd, [&self.branches[0], &self.branches[1]], [image, text])?;
        let both = fwd.tape.concat_cols(&[a, b])?;
        let h = self.head.forward(fwd, both)?;
        fwd.tape.gelu(h)
    }
}

/// Run both co-attention stacks; returns each branch's final `[CLS]` row.
pub fn co_attend(fwd: &mut Forward<'_>, branches: [&MeterBranch; 2], inputs: [&TokenSeq; 2]) -> Result<[Var; 2]> {
    let mut states = Vec::with_capacity(2);
    for (branch, seq) in branches.iter().zip(inputs) {
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
    let masks = [states[0].mask(), states[1].mask()];
    let mut x = [0, 1].map(|i| states[i].tokens.expect("cls present"));
    let depth = branches[0].layers.len();
    for l in 0..depth {
        let mut after_self = x;
        for i in 0..2 {
            let layer = &branches[i].layers[l];
            let rot = branches[i].positional.rotary(&states[i].meta, &states[i].meta)?;
            let h = layer.ln_self.forward(fwd, x[i])?;
            let a = layer.self_attn.forward(fwd, h, h, &masks[i], rot.as_ref())?;
            let a = fwd.dropout(a)?;
            after_self[i] = fwd.tape.add(x[i], a)?;
        }
        let mut next = after_self;
        for i in 0..2 {
            let other = 1 - i;
            let layer = &branches[i].layers[l];
            let rot = branches[i]
                .positional
                .rotary(&states[i].meta, &states[other].meta)?;
            let q = layer.ln_cross.forward(fwd, after_self[i])?;
            let kv = layer.ln_cross.forward(fwd, after_self[other])?;
            let c = layer.cross_attn.forward(fwd, q, kv, &masks[other], rot.as_ref())?;
            let c = fwd.dropout(c)?;
            let y = fwd.tape.add(after_self[i], c)?;
            let h = layer.ln_ff.forward(fwd, y)?;
            let f = layer.ff.forward(fwd, h)?;
            let f = fwd.dropout(f)?;
            next[i] = fwd.tape.add(y, f)?;
        }
        x = next;
    }
    let mut cls_out = x;
    for i in 0..2 {
        let normed = branches[i].final_ln.forward(fwd, x[i])?;
        cls_out[i] = fwd.tape.slice_rows(normed, 0, 1)?;
    }
    Ok(cls_out)
}
