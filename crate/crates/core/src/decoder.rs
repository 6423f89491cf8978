//! Light convolutional decoder shared by the 2D and 3D branches: top-down
//! upsampling, skip concatenation, a 1x1 conv-LN-GELU fusion, and one class
//! head per scale.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{resize_spatial, spatial3, Conv, ConvNormAct, ConvSpec};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub fuse: Vec<ConvNormAct>,
    pub heads: Vec<Conv>,
    pub channels: Vec<usize>,
    pub classes: usize,
    pub rank: usize,
}

impl Decoder {
    /// `channels` lists the encoder widths from finest to coarsest.
    pub fn new(pb: &mut ParamBuilder, name: &str, rank: usize, channels: &[usize], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("decoder", format!("{classes} classes; need at least 2")));
        }
        let mut pb = pb.sub(name);
        let n = channels.len();
        let mut fuse = Vec::new();
        for i in 0..n.saturating_sub(1) {
            let spec = ConvSpec::pointwise(rank, channels[i] + channels[i + 1], channels[i]);
            fuse.push(ConvNormAct::new(&mut pb, &format!("fuse{i}"), spec)?);
        }
        let heads = (0..n)
            .map(|i| Conv::new(&mut pb, &format!("head{i}"), ConvSpec::pointwise(rank, channels[i], classes)))
            .collect::<Result<_>>()?;
        Ok(Self {
            fuse,
            heads,
            channels: channels.to_vec(),
            classes,
            rank,
        })
    }

    /// Per-scale logits, finest first, each at its encoder feature's extent.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, feats: &[Var<'g, T>]) -> Result<Vec<Var<'g, T>>> {
        if feats.len() != self.heads.len() {
            return Err(Error::shape("decoder", format!("{} features for {} scales", feats.len(), self.heads.len())));
        }
        let g = feats[0].graph();
        let _s = g.enter("decoder");
        let n = feats.len();
        let mut maps = vec![feats[n - 1]];
        for i in (0..n - 1).rev() {
            let skip = feats[i];
            let up = resize_spatial(maps[0], spatial3(&skip.shape()), true)?;
            let merged = Var::concat(&[up, skip], 1)?;
            maps.insert(0, self.fuse[i].forward(p, merged)?);
        }
        maps.iter()
            .zip(&self.heads)
            .map(|(&m, h)| {
                let _s = g.enter("head");
                h.forward(p, m)
            })
            .collect()
    }

    /// `dims[i]` is the spatial extent of encoder feature `i`.
    pub fn flops(&self, n: usize, dims: &[[usize; 3]]) -> u64 {
        let fuse: u64 = self.fuse.iter().enumerate().map(|(i, f)| f.conv.flops(n, dims[i])).sum();
        let heads: u64 = self.heads.iter().enumerate().map(|(i, h)| h.flops(n, dims[i])).sum();
        fuse + heads
    }
}
