//! The full classifier: adapters over stored embeddings, modality tokens,
//! a fusion head and a linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingSequence, EncoderConfig, Pooling, TokenSeq, TstEncoder};
use crate::error::{Error, Result};
use crate::fusion::{BlockFusion, ConcatMlp, FusionConfig, FusionMethod, Mbt, Meter};
use crate::nn::{Forward, Linear, ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the stored embeddings.
    pub store_dim: usize,
    pub num_labels: usize,
    pub k_img: usize,
    pub k_text: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    /// Drop padding slots before the transformer instead of carrying them
    /// masked. Both give the same logits; skipping is faster.
    pub skip_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            store_dim: 64,
            num_labels: 13,
            k_img: 1,
            k_text: 50,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            skip_padding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.store_dim == 0 || self.num_labels == 0 {
            return Err(Error::config("store_dim and num_labels must be positive"));
        }
        if self.k_img == 0 || self.k_text == 0 {
            return Err(Error::config("k_img and k_text must be positive"));
        }
        self.encoder.validate()?;
        self.fusion.validate()
    }

    fn max_slots(&self) -> usize {
        1 + self.k_img + self.k_text
    }
}

/// One sample's model input.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    pub image: EmbeddingSequence,
    pub text: EmbeddingSequence,
}

/// Either a pre-classifier representation or, for the ensemble, logits.
#[derive(Clone, Copy, Debug)]
pub enum FusionOutput {
    Joint(Var),
    Logits(Var),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Adapters and modality tokens.
    pub embed: u64,
    /// Everything between the embedded tokens and the classifier, including
    /// per-modality pooling encoders for the vector methods.
    pub fusion: u64,
    pub classifier: u64,
    pub total: u64,
}

#[derive(Clone, Debug)]
struct Pools {
    image: Option<TstEncoder>,
    text: Option<TstEncoder>,
}

#[derive(Clone, Debug)]
enum Head {
    Vilt(TstEncoder),
    Mbt(Mbt),
    Meter(Meter),
    ConcatMlp(Pools, ConcatMlp),
    Block(Pools, BlockFusion),
    Ensemble(Pools, Linear, Linear),
}

#[derive(Clone, Debug)]
struct Net {
    image_adapter: Linear,
    text_adapter: Linear,
    image_token: ParamId,
    text_token: ParamId,
    head: Head,
    classifier: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct HistAid {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    net: Net,
}

impl HistAid {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = {
            let mut pb = ParamBuilder::new(&mut params, &mut rng);
            build(&mut pb, &cfg)?
        };
        Ok(HistAid { cfg, params, net })
    }

    pub fn method(&self) -> FusionMethod {
        self.cfg.fusion.method
    }

    /// Parameter ids of the image and text modality tokens.
    pub fn modality_tokens(&self) -> (ParamId, ParamId) {
        (self.net.image_token, self.net.text_token)
    }

    /// Parameter ids of every attention output projection's weight and bias.
    pub fn attention_output_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        let mut push = |a: &crate::nn::Attention| {
            out.push(a.o.w);
            out.extend(a.o.b);
        };
        let tst = |t: &TstEncoder, push: &mut dyn FnMut(&crate::nn::Attention)| {
            t.stack.layers.iter().for_each(|l| push(&l.attn));
        };
        match &self.net.head {
            Head::Vilt(t) => tst(t, &mut push),
            Head::Mbt(m) => m
                .branches
                .iter()
                .flat_map(|b| &b.layers)
                .for_each(|l| push(&l.attn)),
            Head::Meter(m) => m.branches.iter().flat_map(|b| &b.layers).for_each(|l| {
                push(&l.self_attn);
                push(&l.cross_attn);
            }),
            Head::ConcatMlp(p, _) | Head::Block(p, _) | Head::Ensemble(p, _, _) => {
                for t in [&p.image, &p.text].into_iter().flatten() {
                    tst(t, &mut push);
                }
            }
        }
        out
    }

    fn embed(&self, fwd: &mut Forward<'_>, input: &SampleInput) -> Result<(TokenSeq, TokenSeq)> {
        let cfg = &self.cfg;
        for (seq, k, what) in [(&input.image, cfg.k_img, "image"), (&input.text, cfg.k_text, "text")] {
            if seq.dim() != cfg.store_dim {
                return Err(Error::Shape {
                    op: "model input",
                    lhs: vec![cfg.store_dim],
                    rhs: vec![seq.dim()],
                });
            }
            if seq.capacity() != k {
                return Err(Error::contract(format!(
                    "{what} sequence has {} slots, model expects {k}",
                    seq.capacity()
                )));
            }
        }
        // one shared slot numbering: [CLS] = 0, image from 1, text after image
        let joint_slots = cfg.fusion.method == FusionMethod::Vilt;
        let text_base = if joint_slots { 1 + cfg.k_img } else { 1 };
        let compact = cfg.skip_padding;
        let n = &self.net;
        let img = TokenSeq::embed(fwd, &input.image, &n.image_adapter, n.image_token, 1, compact)?;
        let txt = TokenSeq::embed(fwd, &input.text, &n.text_adapter, n.text_token, text_base, compact)?;
        if cfg.encoder.pooling == Pooling::Mean && cfg.fusion.method.is_sequence_level() {
            let d = cfg.encoder.model_dim;
            return Ok((img.pooled(fwd, d, 1)?, txt.pooled(fwd, d, text_base)?));
        }
        Ok((img, txt))
    }

    fn fuse(&self, fwd: &mut Forward<'_>, img: &TokenSeq, txt: &TokenSeq) -> Result<FusionOutput> {
        let d = self.cfg.encoder.model_dim;
        let joint = match &self.net.head {
            Head::Vilt(enc) => enc.encode(fwd, &[img, txt])?.0,
            Head::Mbt(m) => m.forward(fwd, img, txt)?.joint,
            Head::Meter(m) => m.forward(fwd, img, txt)?,
            Head::ConcatMlp(p, f) => {
                let (a, b) = pool_pair(fwd, p, img, txt, d)?;
                f.forward(fwd, a, b)?
            }
            Head::Block(p, f) => {
                let (a, b) = pool_pair(fwd, p, img, txt, d)?;
                f.forward(fwd, a, b)?
            }
            Head::Ensemble(p, ci, ct) => {
                let (a, b) = pool_pair(fwd, p, img, txt, d)?;
                let la = ci.forward(fwd, a)?;
                let lb = ct.forward(fwd, b)?;
                let s = fwd.tape.add(la, lb)?;
                return Ok(FusionOutput::Logits(fwd.tape.scale(s, 0.5)?));
            }
        };
        Ok(FusionOutput::Joint(joint))
    }

    /// Fusion output for one sample, before the classifier.
    pub fn fusion_output(&self, fwd: &mut Forward<'_>, input: &SampleInput) -> Result<FusionOutput> {
        let (img, txt) = self.embed(fwd, input)?;
        self.fuse(fwd, &img, &txt)
    }

    /// Logits `[1 × C]` for one sample.
    pub fn logits(&self, fwd: &mut Forward<'_>, input: &SampleInput) -> Result<Var> {
        match self.fusion_output(fwd, input)? {
            FusionOutput::Logits(l) => Ok(l),
            FusionOutput::Joint(j) => self
                .net
                .classifier
                .as_ref()
                .expect("non-ensemble heads have a classifier")
                .forward(fwd, j),
        }
    }

    /// Logits `[B × C]` for a batch, all on one tape.
    pub fn batch_logits(&self, fwd: &mut Forward<'_>, inputs: &[&SampleInput]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let rows = inputs
            .iter()
            .map(|x| self.logits(fwd, x))
            .collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            fwd.tape.concat_rows(&rows)
        }
    }

    /// Sigmoid-free scores for inference.
    pub fn predict(&self, input: &SampleInput) -> Result<Vec<f64>> {
        let mut fwd = Forward::inference(&self.params);
        let l = self.logits(&mut fwd, input)?;
        Ok(fwd.tape.value(l).data().to_vec())
    }

    /// Floating-point operations of one inference forward pass.
    pub fn flops(&self, input: &SampleInput) -> Result<FlopCount> {
        let mut fwd = Forward::inference(&self.params);
        let (img, txt) = self.embed(&mut fwd, input)?;
        let embed = fwd.tape.flops();
        let out = self.fuse(&mut fwd, &img, &txt)?;
        let fused = fwd.tape.flops();
        if let FusionOutput::Joint(j) = out {
            if let Some(c) = &self.net.classifier {
                c.forward(&mut fwd, j)?;
            }
        }
        let total = fwd.tape.flops();
        Ok(FlopCount {
            embed,
            fusion: fused - embed,
            classifier: total - fused,
            total,
        })
    }
}

fn pool_pair(
    fwd: &mut Forward<'_>,
    p: &Pools,
    img: &TokenSeq,
    txt: &TokenSeq,
    d: usize,
) -> Result<(Var, Var)> {
    let mut one = |enc: &Option<TstEncoder>, seq: &TokenSeq| -> Result<Var> {
        match enc {
            Some(e) => Ok(e.encode(fwd, &[seq])?.0),
            None => seq.mean_pool(fwd, d),
        }
    };
    let a = one(&p.image, img)?;
    let b = one(&p.text, txt)?;
    Ok((a, b))
}

fn build(pb: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Result<Net> {
    let d = cfg.encoder.model_dim;
    let e = &cfg.encoder;
    let f = &cfg.fusion;
    let (image_adapter, text_adapter) = {
        let mut enc = pb.sub("adapter").with_group(ParamGroup::Encoder);
        (
            Linear::new(&mut enc, "image", cfg.store_dim, d)?,
            Linear::new(&mut enc, "text", cfg.store_dim, d)?,
        )
    };
    let image_token = pb.normal("image_token", &[1, d], 0.02)?;
    let text_token = pb.normal("text_token", &[1, d], 0.02)?;
    let branch_slots = 1 + cfg.k_img.max(cfg.k_text);
    let pools = |pb: &mut ParamBuilder<'_>| -> Result<Pools> {
        if e.pooling == Pooling::Mean {
            return Ok(Pools { image: None, text: None });
        }
        Ok(Pools {
            image: Some(TstEncoder::new(&mut pb.sub("pool_image"), e, e.layers, 1 + cfg.k_img)?),
            text: Some(TstEncoder::new(&mut pb.sub("pool_text"), e, e.layers, 1 + cfg.k_text)?),
        })
    };
    let mut classifier = true;
    let head = match f.method {
        FusionMethod::Vilt => Head::Vilt(TstEncoder::new(&mut pb.sub("vilt"), e, f.vilt_layers, cfg.max_slots())?),
        FusionMethod::Mbt => Head::Mbt(Mbt::new(
            pb,
            e,
            f.mbt_layers,
            f.mbt_fusion_layers,
            f.mbt_bottleneck,
            branch_slots,
        )?),
        FusionMethod::Meter => Head::Meter(Meter::new(pb, e, f.meter_layers, branch_slots)?),
        FusionMethod::ConcatMlp => {
            let p = pools(pb)?;
            let hidden = f.concat_hidden.unwrap_or(2 * d);
            Head::ConcatMlp(p, ConcatMlp::new(pb, d, d, hidden, d)?)
        }
        FusionMethod::Block => {
            let p = pools(pb)?;
            Head::Block(p, BlockFusion::new(pb, d, d, f.block_dims, d)?)
        }
        FusionMethod::Ensemble => {
            classifier = false;
            let p = pools(pb)?;
            let mut sub = pb.sub("ensemble");
            let ci = Linear::new(&mut sub, "image_classifier", d, cfg.num_labels)?;
            let ct = Linear::new(&mut sub, "text_classifier", d, cfg.num_labels)?;
            Head::Ensemble(p, ci, ct)
        }
    };
    let classifier = if classifier {
        Some(Linear::new(pb, "classifier", d, cfg.num_labels)?)
    } else {
        None
    };
    Ok(Net {
        image_adapter,
        text_adapter,
        image_token,
        text_token,
        head,
        classifier,
    })
}

/// Build a `[B × C]` target tensor from 0/1 label rows.
pub fn targets_tensor(rows: &[&[f64]]) -> Result<Tensor> {
    let owned: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
    Tensor::from_rows(&owned)
}
