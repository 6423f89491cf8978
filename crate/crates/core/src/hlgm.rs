//! Hybrid Local-Global fusion: two embedded streams (stacked 2D predictions
//! `F_p` and the raw volume `F_v`) repeatedly exchange information through
//! local windowed cross-attention (LMF) and global cross-attention against
//! spatially reduced keys (GMF), then merge into the 3D encoder input.

use crate::attention::{tokens_3d, untokens_3d, windowed_attention, MsaConfig, MultiHeadAttention, WindowSpec, Windowing};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{spatial3, Conv, ConvNormAct, ConvSpec, Cpff, PROJ_STD};
use crate::params::{Bound, Init, ParamBuilder};
use crate::tensor::Scalar;

/// 3D conv-LN-GELU twice: stride (2,2,2) then (1,2,2).
#[derive(Clone, Debug)]
pub struct StreamEmbed {
    pub conv1: ConvNormAct,
    pub conv2: ConvNormAct,
}

impl StreamEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            conv1: ConvNormAct::new(&mut pb, "conv1", ConvSpec::new(3, cin, dim / 2, 3, 2))?,
            conv2: ConvNormAct::new(&mut pb, "conv2", ConvSpec::new(3, dim / 2, dim, 3, 1).stride3([1, 2, 2]))?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv1.forward(p, x)?;
        self.conv2.forward(p, y)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        self.conv2.conv.out_dims(self.conv1.conv.out_dims(dims))
    }

    pub fn flops(&self, dims: [usize; 3]) -> u64 {
        let d1 = self.conv1.conv.out_dims(dims);
        self.conv1.conv.flops(1, dims) + self.conv2.conv.flops(1, d1)
    }
}

/// Kernel-`r` stride-`r` 3D reduction applied after right-padding every
/// spatial extent to a multiple of `r`.
#[derive(Clone, Debug)]
pub struct SpatialReduce {
    pub conv: Conv,
    pub r: usize,
}

impl SpatialReduce {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::invalid("gmf", "reduction ratio must be >= 1"));
        }
        let spec = ConvSpec::new(3, dim, dim, r, r)
            .kernel3([r; 3], [0; 3])
            .init(Init::TruncNormal(PROJ_STD));
        Ok(Self {
            conv: Conv::new(pb, name, spec)?,
            r,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let r = self.r;
        let mut y = x;
        for axis in 2..5 {
            y = y.pad(axis, 0, (r - s[axis] % r) % r)?;
        }
        let _s = x.graph().enter("sr");
        self.conv.forward(p, y)
    }

    pub fn padded(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|v| v.div_ceil(self.r) * self.r)
    }

    pub fn out_len(&self, dims: [usize; 3]) -> usize {
        dims.iter().map(|v| v.div_ceil(self.r)).product()
    }

    pub fn flops(&self, dims: [usize; 3]) -> u64 {
        self.conv.flops(1, self.padded(dims))
    }
}

/// Local Mutual Fusion: cross-attention within matching non-overlapping
/// 3D regions of the two streams.
#[derive(Clone, Debug)]
pub struct Lmf {
    pub attn: MultiHeadAttention,
    pub region: [usize; 3],
}

impl Lmf {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig, region: [usize; 3]) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(pb, name, cfg)?,
            region,
        })
    }

    pub fn layout(&self, dims: [usize; 3]) -> Result<Windowing> {
        Windowing::new(dims, WindowSpec::new(self.region))
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, q: Var<'g, T>, kv: Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = q.graph().enter("lmf");
        let layout = self.layout(spatial3(&q.shape()))?;
        windowed_attention(&self.attn, p, q, kv, &layout)
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        let l = self.layout(dims)?;
        Ok(self.attn.flops(l.count(), l.tokens(), l.tokens()))
    }
}

/// Global Mutual Fusion: every query token attends to the spatially
/// reduced tokens of the other stream.
#[derive(Clone, Debug)]
pub struct Gmf {
    pub attn: MultiHeadAttention,
    pub sr: SpatialReduce,
}

impl Gmf {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig, r: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb, "attn", cfg)?,
            sr: SpatialReduce::new(&mut pb, "sr", cfg.dim, r)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, q: Var<'g, T>, kv: Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = q.graph().enter("gmf");
        let dims = spatial3(&q.shape());
        let kv = tokens_3d(self.sr.forward(p, kv)?)?;
        let out = self.attn.forward(p, tokens_3d(q)?, kv, None)?;
        untokens_3d(out, dims)
    }

    pub fn flops(&self, dims: [usize; 3]) -> u64 {
        let lq: usize = dims.iter().product();
        self.sr.flops(dims) + self.attn.flops(1, lq, self.sr.out_len(dims))
    }
}

/// One direction of a fusion block: `F^ = LMF(q, kv) + GMF(q, kv) + q`,
/// `out = CPFF(F^) + F^`.
#[derive(Clone, Debug)]
pub struct FusionDirection {
    pub lmf: Lmf,
    pub gmf: Gmf,
    pub ffn: Cpff,
}

impl FusionDirection {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let msa = MsaConfig::new(cfg.hlgm_dim, cfg.hlgm_heads)?;
        Ok(Self {
            lmf: Lmf::new(&mut pb, "lmf", msa, cfg.hlgm_region)?,
            gmf: Gmf::new(&mut pb, "gmf", msa, cfg.hlgm_reduction)?,
            ffn: Cpff::new(&mut pb, "ffn", 3, cfg.hlgm_dim, cfg.cpff_ratio)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, q: Var<'g, T>, kv: Var<'g, T>) -> Result<Var<'g, T>> {
        if q.shape() != kv.shape() {
            return Err(Error::shape("hlgm_block", format!("streams {:?} vs {:?}", q.shape(), kv.shape())));
        }
        let local = self.lmf.forward(p, q, kv)?;
        let global = self.gmf.forward(p, q, kv)?;
        let mid = local.add(global)?.add(q)?;
        self.ffn.forward(p, mid)?.add(mid)
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        Ok(self.lmf.flops(dims)? + self.gmf.flops(dims) + self.ffn.flops(1, dims))
    }
}

/// Symmetric fusion block with untied weights per direction. Both updates
/// read the previous iterates.
#[derive(Clone, Debug)]
pub struct HlgmBlock {
    /// Queries from `F_p`, keys/values from `F_v`.
    pub to_p: FusionDirection,
    /// Queries from `F_v`, keys/values from `F_p`.
    pub to_v: FusionDirection,
}

impl HlgmBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            to_p: FusionDirection::new(&mut pb, "to_p", cfg)?,
            to_v: FusionDirection::new(&mut pb, "to_v", cfg)?,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        fp: Var<'g, T>,
        fv: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let np = self.to_p.forward(p, fp, fv)?;
        let nv = self.to_v.forward(p, fv, fp)?;
        Ok((np, nv))
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        Ok(self.to_p.flops(dims)? + self.to_v.flops(dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Hlgm {
    pub embed_p: StreamEmbed,
    pub embed_v: StreamEmbed,
    pub blocks: Vec<HlgmBlock>,
    /// Concatenated streams to the 3D encoder width.
    pub merge: Conv,
}

impl Hlgm {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let dim = cfg.hlgm_dim;
        Ok(Self {
            embed_p: StreamEmbed::new(&mut pb, "embed_p", cfg.num_classes, dim)?,
            embed_v: StreamEmbed::new(&mut pb, "embed_v", cfg.in_channels, dim)?,
            blocks: (0..cfg.hlgm_blocks)
                .map(|i| HlgmBlock::new(&mut pb, &format!("block{i}"), cfg))
                .collect::<Result<_>>()?,
            merge: Conv::new(&mut pb, "merge", ConvSpec::pointwise(3, 2 * dim, cfg.channels_3d[0]))?,
        })
    }

    /// `p2d: [K, D, H, W]` and `vol: [C_in, D, H, W]` to the embedded
    /// streams `[1, dim, D/2, H/4, W/4]`.
    pub fn embed<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        p2d: Var<'g, T>,
        vol: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let (sp, sv) = (p2d.shape(), vol.shape());
        if sp.len() != 4 || sv.len() != 4 || sp[1..] != sv[1..] {
            return Err(Error::shape("stream_embed", format!("prediction {sp:?} vs volume {sv:?}")));
        }
        let _s = p2d.graph().enter("stream_embed");
        let lift = |x: Var<'g, T>| {
            let s = x.shape();
            x.reshape(&[1, s[0], s[1], s[2], s[3]])
        };
        Ok((self.embed_p.forward(p, lift(p2d)?)?, self.embed_v.forward(p, lift(vol)?)?))
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, p2d: Var<'g, T>, vol: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = p2d.graph();
        let _s = g.enter("hlgm");
        let (mut fp, mut fv) = self.embed(p, p2d, vol)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let _s = g.enter(format!("block{i}"));
            (fp, fv) = b.forward(p, fp, fv)?;
        }
        let _s = g.enter("merge");
        self.merge.forward(p, Var::concat(&[fp, fv], 1)?)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        self.embed_v.out_dims(dims)
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        let e = self.out_dims(dims);
        let mut total = self.embed_p.flops(dims) + self.embed_v.flops(dims) + self.merge.flops(1, e);
        for b in &self.blocks {
            total += b.flops(e)?;
        }
        Ok(total)
    }
}
