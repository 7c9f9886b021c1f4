use super::forward::Forward;
use super::params::{ParamBuilder, ParamId};
use crate::error::{Error, Result};
use crate::temporal::rotation_tables;
use crate::tensor::Var;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Linear {
            w: sub.weight("w", d_in, d_out)?,
            b: Some(sub.zeros("b", &[1, d_out])?),
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Linear {
            w: sub.weight("w", d_in, d_out)?,
            b: None,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fwd.p(self.w);
        let y = fwd.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = fwd.p(b);
                fwd.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(LayerNorm {
            gamma: sub.ones("gamma", &[d])?,
            beta: sub.zeros("beta", &[d])?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let g = fwd.p(self.gamma);
        let b = fwd.p(self.beta);
        fwd.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Precomputed rotary tables for the query and key rows of one attention call,
/// sized for a single head.
#[derive(Clone, Debug)]
pub struct Rotary {
    q: (Vec<f64>, Vec<f64>),
    k: (Vec<f64>, Vec<f64>),
}

impl Rotary {
    /// `q_pos` and `k_pos` are already-scaled positions.
    pub fn new(q_pos: &[f64], k_pos: &[f64], head_dim: usize, base: f64) -> Result<Self> {
        Ok(Rotary {
            q: rotation_tables(q_pos, head_dim, base)?,
            k: rotation_tables(k_pos, head_dim, base)?,
        })
    }

    pub fn symmetric(pos: &[f64], head_dim: usize, base: f64) -> Result<Self> {
        let t = rotation_tables(pos, head_dim, base)?;
        Ok(Rotary { q: t.clone(), k: t })
    }
}

/// Multi-head scaled dot-product attention with key masking.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let mut sub = pb.sub(name);
        Ok(Attention {
            q: Linear::new(&mut sub, "q", d, d)?,
            // a key bias adds the same q·b to every score in a row, which
            // softmax cancels; leaving it out keeps every parameter live
            k: Linear::no_bias(&mut sub, "k", d, d)?,
            v: Linear::new(&mut sub, "v", d, d)?,
            o: Linear::new(&mut sub, "o", d, d)?,
            heads,
            head_dim: d / heads,
        })
    }

    /// `queries` `[n×d]` attend over `context` `[m×d]`; `key_mask[j]` false
    /// excludes context row `j`. With `rotary`, queries and keys (never
    /// values) are rotated per head.
    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        queries: Var,
        context: Var,
        key_mask: &[bool],
        rotary: Option<&Rotary>,
    ) -> Result<Var> {
        let q = self.q.forward(fwd, queries)?;
        let k = self.k.forward(fwd, context)?;
        let v = self.v.forward(fwd, context)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let mut qh = fwd.tape.slice_cols(q, start, self.head_dim)?;
            let mut kh = fwd.tape.slice_cols(k, start, self.head_dim)?;
            let vh = if self.heads == 1 {
                v
            } else {
                fwd.tape.slice_cols(v, start, self.head_dim)?
            };
            if let Some(r) = rotary {
                qh = fwd.tape.rotate_pairs(qh, r.q.0.clone(), r.q.1.clone())?;
                kh = fwd.tape.rotate_pairs(kh, r.k.0.clone(), r.k.1.clone())?;
            }
            let kt = fwd.tape.transpose(kh)?;
            let scores = fwd.tape.matmul(qh, kt)?;
            let scores = fwd.tape.scale(scores, scale)?;
            let weights = fwd.tape.softmax_last(scores, Some(key_mask))?;
            fwd.record_attention(weights);
            outs.push(fwd.tape.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            fwd.tape.concat_cols(&outs)?
        };
        self.o.forward(fwd, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(FeedForward {
            up: Linear::new(&mut sub, "up", d, hidden)?,
            down: Linear::new(&mut sub, "down", hidden, d)?,
        })
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(fwd, x)?;
        let h = fwd.tape.gelu(h)?;
        self.down.forward(fwd, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize, ff_dim: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(EncoderLayer {
            ln_attn: LayerNorm::new(&mut sub, "ln_attn", d)?,
            attn: Attention::new(&mut sub, "attn", d, heads)?,
            ln_ff: LayerNorm::new(&mut sub, "ln_ff", d)?,
            ff: FeedForward::new(&mut sub, "ff", d, ff_dim)?,
        })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        x: Var,
        key_mask: &[bool],
        rotary: Option<&Rotary>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(fwd, x)?;
        let a = self.attn.forward(fwd, h, h, key_mask, rotary)?;
        let a = fwd.dropout(a)?;
        let x = fwd.tape.add(x, a)?;
        self.feed_forward(fwd, x)
    }

    pub fn feed_forward(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.ln_ff.forward(fwd, x)?;
        let f = self.ff.forward(fwd, h)?;
        let f = fwd.dropout(f)?;
        fwd.tape.add(x, f)
    }
}

/// A stack of encoder layers with a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl Stack {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        depth: usize,
        d: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self> {
        let mut sub = pb.sub(name);
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(&mut sub, &format!("layer{i}"), d, heads, ff_dim))
            .collect::<Result<_>>()?;
        Ok(Stack {
            layers,
            final_ln: LayerNorm::new(&mut sub, "final_ln", d)?,
        })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        mut x: Var,
        key_mask: &[bool],
        rotary: Option<&Rotary>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(fwd, x, key_mask, rotary)?;
        }
        self.final_ln.forward(fwd, x)
    }
}
