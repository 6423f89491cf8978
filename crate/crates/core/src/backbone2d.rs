//! Slice-wise 2D transformer: convolutional patch embedding, four stages of
//! GR blocks, and a light decoder with four deep-supervision heads.
//!
//! Slices travel as the batch axis: input `[N, C_in, H, W]`.

use crate::attention::{GrMsa, MsaConfig};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{resize_spatial, spatial3, Conv, ConvNormAct, ConvSpec, Cpff, Downsample, LayerNorm};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Scalar;

/// Two overlapping stride-2 conv-LN-GELU layers and a 1x1 projection:
/// `[N, C_in, H, W] -> [N, C, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct PatchEmbed2d {
    pub conv1: ConvNormAct,
    pub conv2: ConvNormAct,
    pub proj: Conv,
}

impl PatchEmbed2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            conv1: ConvNormAct::new(&mut pb, "conv1", ConvSpec::new(2, cin, dim / 2, 3, 2))?,
            conv2: ConvNormAct::new(&mut pb, "conv2", ConvSpec::new(2, dim / 2, dim, 3, 2))?,
            proj: Conv::new(&mut pb, "proj", ConvSpec::pointwise(2, dim, dim))?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = x.graph().enter("patch_embed");
        let y = self.conv1.forward(p, x)?;
        let y = self.conv2.forward(p, y)?;
        self.proj.forward(p, y)
    }

    pub fn out_dims(&self, h: usize, w: usize) -> [usize; 3] {
        self.conv2.conv.out_dims(self.conv1.conv.out_dims([1, h, w]))
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let d1 = self.conv1.conv.out_dims([1, h, w]);
        let d2 = self.conv2.conv.out_dims(d1);
        self.conv1.conv.flops(n, [1, h, w]) + self.conv2.conv.flops(n, d1) + self.proj.flops(n, d2)
    }
}

/// Pre-norm GR-MSA and CPFF sublayers, each with a residual connection.
#[derive(Clone, Debug)]
pub struct GrBlock {
    pub norm1: LayerNorm,
    pub attn: GrMsa,
    pub norm2: LayerNorm,
    pub ffn: Cpff,
}

impl GrBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig, r: usize, ratio: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut pb, "norm1", cfg.dim)?,
            attn: GrMsa::new(&mut pb, "attn", cfg, r)?,
            norm2: LayerNorm::new(&mut pb, "norm2", cfg.dim)?,
            ffn: Cpff::new(&mut pb, "ffn", 2, cfg.dim, ratio)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.attn.forward(p, self.norm1.channels(p, x)?)?.add(x)?;
        self.ffn.forward(p, self.norm2.channels(p, y)?)?.add(y)
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        self.attn.flops(n, h, w) + self.ffn.flops(n, [1, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct Backbone2d {
    pub embed: PatchEmbed2d,
    pub stages: Vec<Vec<GrBlock>>,
    pub downs: Vec<Downsample>,
    pub decoder: Decoder,
}

/// Encoder features and per-scale logits of a batch of slices. `logits[0]`
/// is at input resolution; `logits[i]` for `i >= 1` sits at stage `i + 1`
/// resolution (`H / 2^(i+2)`).
pub struct Output2d<'g, T: Scalar> {
    pub feats: Vec<Var<'g, T>>,
    pub logits: Vec<Var<'g, T>>,
}

impl Backbone2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let ch = cfg.channels_2d;
        let embed = PatchEmbed2d::new(&mut pb, "embed", cfg.in_channels, ch[0])?;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for i in 0..4 {
            let msa = MsaConfig::new(ch[i], cfg.heads_2d[i])?;
            let blocks = (0..cfg.depths_2d[i])
                .map(|b| GrBlock::new(&mut pb, &format!("stage{i}.block{b}"), msa, cfg.reductions_2d[i], cfg.cpff_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if i < 3 {
                downs.push(Downsample::new(&mut pb, &format!("down{i}"), 2, ch[i], ch[i + 1])?);
            }
        }
        let decoder = Decoder::new(&mut pb, "decoder", 2, &ch, cfg.num_classes)?;
        Ok(Self {
            embed,
            stages,
            downs,
            decoder,
        })
    }

    pub fn encode<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let g = x.graph();
        let mut y = self.embed.forward(p, x)?;
        let mut feats = Vec::new();
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                let _s = g.enter("downsample");
                y = self.downs[i - 1].forward(p, y)?;
            }
            let _s = g.enter(format!("stage{i}"));
            for b in blocks {
                y = b.forward(p, y)?;
            }
            feats.push(y);
        }
        Ok(feats)
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Output2d<'g, T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("backbone_2d", format!("expected [N, C, H, W], got {s:?}")));
        }
        let _s = x.graph().enter("2d");
        let feats = self.encode(p, x)?;
        let mut logits = self.decoder.forward(p, &feats)?;
        logits[0] = resize_spatial(logits[0], [1, s[2], s[3]], true)?;
        Ok(Output2d { feats, logits })
    }

    /// Spatial extents of the four encoder features for an `h x w` slice.
    pub fn feature_dims(&self, h: usize, w: usize) -> Vec<[usize; 3]> {
        let mut d = self.embed.out_dims(h, w);
        let mut out = vec![d];
        for down in &self.downs {
            d = down.out_dims(d);
            out.push(d);
        }
        out
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let dims = self.feature_dims(h, w);
        let mut total = self.embed.flops(n, h, w);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                total += self.downs[i - 1].flops(n, dims[i - 1]);
            }
            total += blocks.iter().map(|b| b.flops(n, dims[i][1], dims[i][2])).sum::<u64>();
        }
        total + self.decoder.flops(n, &dims)
    }
}

/// Runs the 2D branch slice by slice over a volume `[C_in, D, H, W]` and
/// restacks every output as `[K, D, h, w]`.
pub fn predict_volume_2d<'g, T: Scalar>(
    net: &Backbone2d,
    p: &Bound<'g, T>,
    vol: Var<'g, T>,
) -> Result<Vec<Var<'g, T>>> {
    let s = vol.shape();
    if s.len() != 4 || s[1] == 0 {
        return Err(Error::shape("predict_volume_2d", format!("expected [C, D, H, W], got {s:?}")));
    }
    let slices = vol.permute(&[1, 0, 2, 3])?;
    let out = net.forward(p, slices)?;
    out.logits.iter().map(|l| l.permute(&[1, 0, 2, 3])).collect()
}

/// Spatial extent of a `[K, D, h, w]` stacked prediction.
pub fn stacked_dims(shape: &[usize]) -> [usize; 3] {
    spatial3(&[1, shape[0], shape[1], shape[2], shape[3]])
}
