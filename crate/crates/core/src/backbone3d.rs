//! 3D transformer over the fused volume: four stages of alternating local
//! (L3D) and shifted (SL3D) window blocks, and the mirrored light decoder.
//!
//! Features are `[1, C, D, H, W]`.

use crate::attention::{L3dMsa, MsaConfig, WindowSpec};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{spatial3, Cpff, Downsample, LayerNorm};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct L3dBlock {
    pub norm1: LayerNorm,
    pub attn: L3dMsa,
    pub norm2: LayerNorm,
    pub ffn: Cpff,
}

impl L3dBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig, spec: WindowSpec, ratio: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut pb, "norm1", cfg.dim)?,
            attn: L3dMsa::new(&mut pb, "attn", cfg, spec)?,
            norm2: LayerNorm::new(&mut pb, "norm2", cfg.dim)?,
            ffn: Cpff::new(&mut pb, "ffn", 3, cfg.dim, ratio)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.forward_spec(p, x, self.attn.spec)
    }

    /// Forward with an explicit window layout (degeneracy checks).
    pub fn forward_spec<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, spec: WindowSpec) -> Result<Var<'g, T>> {
        let y = self.attn.forward_spec(p, self.norm1.channels(p, x)?, spec)?.add(x)?;
        self.ffn.forward(p, self.norm2.channels(p, y)?)?.add(y)
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        Ok(self.attn.flops(dims)? + self.ffn.flops(1, dims))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone3d {
    pub stages: Vec<Vec<L3dBlock>>,
    pub downs: Vec<Downsample>,
    pub decoder: Decoder,
}

impl Backbone3d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let ch = cfg.channels_3d;
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        for i in 0..4 {
            let msa = MsaConfig::new(ch[i], cfg.heads_3d[i])?;
            let blocks = (0..cfg.depths_3d[i])
                .map(|b| {
                    let spec = if b % 2 == 0 {
                        WindowSpec::new(cfg.window_3d)
                    } else {
                        WindowSpec::shifted(cfg.window_3d)
                    };
                    L3dBlock::new(&mut pb, &format!("stage{i}.block{b}"), msa, spec, cfg.cpff_ratio)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if i < 3 {
                downs.push(Downsample::new(&mut pb, &format!("down{i}"), 3, ch[i], ch[i + 1])?);
            }
        }
        let decoder = Decoder::new(&mut pb, "decoder", 3, &ch, cfg.num_classes)?;
        Ok(Self { stages, downs, decoder })
    }

    pub fn encode<'g, T: Scalar>(&self, p: &Bound<'g, T>, f0: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let s = f0.shape();
        if s.len() != 5 || s[0] != 1 {
            return Err(Error::shape("encoder_3d", format!("expected [1, C, D, H, W], got {s:?}")));
        }
        let g = f0.graph();
        let mut y = f0;
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

    /// Per-scale logits `[1, K, d, h, w]`, finest first, each at its
    /// encoder stage's extent.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, f0: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let _s = f0.graph().enter("3d");
        let feats = self.encode(p, f0)?;
        self.decoder.forward(p, &feats)
    }

    pub fn feature_dims(&self, dims: [usize; 3]) -> Vec<[usize; 3]> {
        let mut d = dims;
        let mut out = vec![d];
        for down in &self.downs {
            d = down.out_dims(d);
            out.push(d);
        }
        out
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        let dims = self.feature_dims(dims);
        let mut total = 0;
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                total += self.downs[i - 1].flops(1, dims[i - 1]);
            }
            for b in blocks {
                total += b.flops(dims[i])?;
            }
        }
        Ok(total + self.decoder.flops(1, &dims))
    }
}

/// `[1, C, D, H, W]` spatial extents.
pub fn dims_of<T: Scalar>(x: Var<'_, T>) -> [usize; 3] {
    spatial3(&x.shape())
}
