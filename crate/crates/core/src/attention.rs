//! Attention variants: plain multi-head (self or cross) attention, global
//! reduction attention for 2D maps, and local (optionally shifted) 3D
//! window attention.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv, ConvSpec, Linear};
use crate::params::{Bound, Init, ParamBuilder};
use crate::tensor::{Scalar, Tensor};

/// Additive score offset for masked pairs; `exp` underflows to exactly 0.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsaConfig {
    pub dim: usize,
    pub heads: usize,
    pub qkv_bias: bool,
}

impl MsaConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid("msa", format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            qkv_bias: true,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources. Scale is `1/sqrt(head_dim)`; no position bias.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: MsaConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let c = cfg.dim;
        Ok(Self {
            cfg,
            q: Linear::new(&mut pb, "q", c, c, cfg.qkv_bias)?,
            k: Linear::new(&mut pb, "k", c, c, cfg.qkv_bias)?,
            v: Linear::new(&mut pb, "v", c, c, cfg.qkv_bias)?,
            proj: Linear::new(&mut pb, "proj", c, c, true)?,
        })
    }

    /// `q_src: [B, Lq, C]`, `kv_src: [B, Lkv, C]`, optional additive
    /// `mask: [B, Lq, Lkv]` shared by all heads. Returns `[B, Lq, C]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        q_src: Var<'g, T>,
        kv_src: Var<'g, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_probs(p, q_src, kv_src, mask)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns the attention
    /// weights, `[B * heads, Lq, Lkv]`.
    pub fn forward_with_probs<'g, T: Scalar>(
        &self,
        p: &Bound<'g, T>,
        q_src: Var<'g, T>,
        kv_src: Var<'g, T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let g = q_src.graph();
        let (sq, skv) = (q_src.shape(), kv_src.shape());
        let c = self.cfg.dim;
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] || sq[2] != c || skv[2] != c {
            return Err(Error::shape("msa", format!("query {sq:?}, key/value {skv:?}, dim {c}")));
        }
        let (b, lq, lkv) = (sq[0], sq[1], skv[1]);
        let (h, hd) = (self.cfg.heads, self.cfg.head_dim());
        let q = {
            let _s = g.enter("q_proj");
            self.q.forward(p, q_src)?
        };
        let (k, v) = {
            let _s = g.enter("kv_proj");
            (self.k.forward(p, kv_src)?, self.v.forward(p, kv_src)?)
        };
        let split = |t: Var<'g, T>, l: usize| -> Result<Var<'g, T>> {
            t.reshape(&[b, l, h, hd])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, l, hd])
        };
        let (qh, kh, vh) = (split(q, lq)?, split(k, lkv)?, split(v, lkv)?);
        let scores = {
            let _s = g.enter("qk");
            qh.bmm(kh, true)?
        }
        .scale(1.0 / (hd as f64).sqrt())?;
        let scores = match mask {
            Some(m) => {
                if m.shape() != [b, lq, lkv] {
                    return Err(Error::shape("msa", format!("mask {:?} for [{b}, {lq}, {lkv}]", m.shape())));
                }
                scores.add(g.constant(expand_heads(m, h)))?
            }
            None => scores,
        };
        let probs = scores.softmax(2)?;
        let ctx = {
            let _s = g.enter("av");
            probs.bmm(vh, false)?
        };
        let merged = ctx.reshape(&[b, h, lq, hd])?.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, c])?;
        let out = {
            let _s = g.enter("out_proj");
            self.proj.forward(p, merged)?
        };
        Ok((out, probs))
    }

    /// Closed-form FLOPs for one call (multiply-adds count 2).
    pub fn flops(&self, b: usize, lq: usize, lkv: usize) -> u64 {
        let c = self.cfg.dim;
        let proj = self.q.flops(b * lq) + self.k.flops(b * lkv) + self.v.flops(b * lkv) + self.proj.flops(b * lq);
        proj + 2 * qk_flops(b, lq, lkv, c)
    }
}

/// FLOPs of the `Q Kᵀ` product summed over heads: `2 * B * Lq * Lkv * C`.
pub fn qk_flops(b: usize, lq: usize, lkv: usize, dim: usize) -> u64 {
    2 * (b * lq * lkv * dim) as u64
}

fn expand_heads<T: Scalar>(mask: &Tensor<T>, heads: usize) -> Tensor<T> {
    let s = mask.shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(mask.numel() * heads);
    for chunk in mask.data().chunks(per) {
        for _ in 0..heads {
            data.extend_from_slice(chunk);
        }
    }
    Tensor::from_parts(vec![s[0] * heads, s[1], s[2]], data)
}

/// `[N, C, H, W] -> [N, H*W, C]`.
pub fn tokens_2d<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0], s[2] * s[3], s[1]])
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn untokens_2d<'g, T: Scalar>(t: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
    let s = t.shape();
    t.reshape(&[s[0], h, w, s[2]])?.permute(&[0, 3, 1, 2])
}

/// `[1, C, D, H, W] -> [1, D*H*W, C]`.
pub fn tokens_3d<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 3, 4, 1])?.reshape(&[s[0], s[2] * s[3] * s[4], s[1]])
}

/// `[1, D*H*W, C] -> [1, C, D, H, W]`.
pub fn untokens_3d<'g, T: Scalar>(t: Var<'g, T>, dims: [usize; 3]) -> Result<Var<'g, T>> {
    let s = t.shape();
    t.reshape(&[s[0], dims[0], dims[1], dims[2], s[2]])?.permute(&[0, 4, 1, 2, 3])
}

/// Global Reduction attention: full-resolution queries attend to keys and
/// values taken from a stride-`r` convolution of the same map, plus a
/// parallel 3x3 depth-wise convolution branch.
#[derive(Clone, Debug)]
pub struct GrMsa {
    pub attn: MultiHeadAttention,
    pub reduce: Conv,
    pub dw: Conv,
    pub r: usize,
}

impl GrMsa {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::invalid("gr_msa", "reduction ratio must be >= 1"));
        }
        let mut pb = pb.sub(name);
        let c = cfg.dim;
        let reduce_spec = ConvSpec::new(2, c, c, r, r)
            .kernel3([1, r, r], [0, 0, 0])
            .init(Init::TruncNormal(crate::nn::PROJ_STD));
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb, "attn", cfg)?,
            reduce: Conv::new(&mut pb, "reduce", reduce_spec)?,
            dw: Conv::new(&mut pb, "dw", ConvSpec::depthwise(2, c, 3))?,
            r,
        })
    }

    /// Right-pads `x: [N, C, H, W]` to multiples of `r`, then applies the
    /// kernel-`r` stride-`r` reduction convolution.
    pub fn reduce<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let r = self.r;
        let x = x.pad(2, 0, (r - s[2] % r) % r)?.pad(3, 0, (r - s[3] % r) % r)?;
        let _s = x.graph().enter("reduce");
        self.reduce.forward(p, x)
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let _s = g.enter("gr_msa");
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let kv = tokens_2d(self.reduce(p, x)?)?;
        let q = tokens_2d(x)?;
        let att = untokens_2d(self.attn.forward(p, q, kv, None)?, h, w)?;
        let dw = {
            let _s = g.enter("dw");
            self.dw.forward(p, x)?
        };
        att.add(dw)
    }

    pub fn reduced_len(&self, h: usize, w: usize) -> usize {
        h.div_ceil(self.r) * w.div_ceil(self.r)
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let (hr, wr) = (h.div_ceil(self.r), w.div_ceil(self.r));
        self.reduce.flops(n, [1, hr * self.r, wr * self.r])
            + self.attn.flops(n, h * w, hr * wr)
            + self.dw.flops(n, [1, h, w])
    }
}

/// 3D window edge and cyclic shift, per axis (D, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub size: [usize; 3],
    pub shift: [usize; 3],
}

impl WindowSpec {
    pub fn new(size: [usize; 3]) -> Self {
        Self { size, shift: [0; 3] }
    }

    /// Half-window shift on every axis.
    pub fn shifted(size: [usize; 3]) -> Self {
        Self {
            size,
            shift: [size[0] / 2, size[1] / 2, size[2] / 2],
        }
    }

    pub fn with_shift(size: [usize; 3], shift: [usize; 3]) -> Self {
        Self { size, shift }
    }
}

/// A [`WindowSpec`] resolved against concrete feature extents: windows are
/// clamped to the extents (and unshifted on clamped axes), extents are
/// right-padded to window multiples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Windowing {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
}

impl Windowing {
    pub fn new(dims: [usize; 3], spec: WindowSpec) -> Result<Self> {
        let mut window = [0; 3];
        let mut shift = [0; 3];
        let mut padded = [0; 3];
        for a in 0..3 {
            if spec.size[a] == 0 || dims[a] == 0 {
                return Err(Error::invalid("window_partition", format!("window {:?} on {dims:?}", spec.size)));
            }
            if spec.shift[a] >= spec.size[a] {
                return Err(Error::invalid(
                    "window_partition",
                    format!("shift {:?} must be below window {:?}", spec.shift, spec.size),
                ));
            }
            window[a] = spec.size[a].min(dims[a]);
            shift[a] = if window[a] < dims[a] { spec.shift[a] } else { 0 };
            padded[a] = dims[a].div_ceil(window[a]) * window[a];
        }
        Ok(Self {
            dims,
            window,
            shift,
            padded,
        })
    }

    pub fn grid(&self) -> [usize; 3] {
        [
            self.padded[0] / self.window[0],
            self.padded[1] / self.window[1],
            self.padded[2] / self.window[2],
        ]
    }

    pub fn count(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn tokens(&self) -> usize {
        self.window.iter().product()
    }

    pub fn needs_mask(&self) -> bool {
        self.shift != [0; 3] || self.padded != self.dims
    }

    /// Region label (Swin convention) and padding flag for rolled position
    /// `p` along axis `a`.
    fn axis_tag(&self, a: usize, p: usize) -> (u8, bool) {
        let (l, lp, w, s) = (self.dims[a], self.padded[a], self.window[a], self.shift[a]);
        let orig = (p + s) % lp;
        let label = if s == 0 || p < lp - w {
            0
        } else if p < lp - s {
            1
        } else {
            2
        };
        (label, orig >= l)
    }

    /// Rolled-grid coordinates of every token, window by window.
    fn token_coords(&self) -> Vec<[usize; 3]> {
        let grid = self.grid();
        let mut out = Vec::with_capacity(self.count() * self.tokens());
        for gd in 0..grid[0] {
            for gh in 0..grid[1] {
                for gw in 0..grid[2] {
                    for td in 0..self.window[0] {
                        for th in 0..self.window[1] {
                            for tw in 0..self.window[2] {
                                out.push([
                                    gd * self.window[0] + td,
                                    gh * self.window[1] + th,
                                    gw * self.window[2] + tw,
                                ]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Additive mask `[windows, T, T]`: 0 where attention is allowed,
    /// [`MASK_NEG`] across a shift wrap or towards padding.
    pub fn mask<T: Scalar>(&self) -> Tensor<T> {
        let n = self.tokens();
        let tags: Vec<([u8; 3], bool)> = self
            .token_coords()
            .iter()
            .map(|c| {
                let mut label = [0u8; 3];
                let mut pad = false;
                for a in 0..3 {
                    let (l, p) = self.axis_tag(a, c[a]);
                    label[a] = l;
                    pad |= p;
                }
                (label, pad)
            })
            .collect();
        let neg = T::lit(MASK_NEG);
        let mut data = vec![T::zero(); self.count() * n * n];
        for wi in 0..self.count() {
            let win = &tags[wi * n..(wi + 1) * n];
            for (i, (li, _)) in win.iter().enumerate() {
                for (j, (lj, pj)) in win.iter().enumerate() {
                    if li != lj || *pj {
                        data[(wi * n + i) * n + j] = neg;
                    }
                }
            }
        }
        Tensor::from_parts(vec![self.count(), n, n], data)
    }

    /// Original (unrolled, unpadded) voxel for each window token, or `None`
    /// for padding.
    pub fn token_sources(&self) -> Vec<Option<[usize; 3]>> {
        self.token_coords()
            .iter()
            .map(|c| {
                let mut o = [0; 3];
                for a in 0..3 {
                    o[a] = (c[a] + self.shift[a]) % self.padded[a];
                    if o[a] >= self.dims[a] {
                        return None;
                    }
                }
                Some(o)
            })
            .collect()
    }

    /// `[1, C, D, H, W] -> [windows, T, C]`: pad, roll by `-shift`, split.
    pub fn partition<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 5 || s[0] != 1 || [s[2], s[3], s[4]] != self.dims {
            return Err(Error::shape("window_partition", format!("{s:?} for extents {:?}", self.dims)));
        }
        let c = s[1];
        let mut t = x.reshape(&[c, s[2], s[3], s[4]])?.permute(&[1, 2, 3, 0])?;
        for a in 0..3 {
            t = t.pad(a, 0, self.padded[a] - self.dims[a])?;
            t = t.roll(a, -(self.shift[a] as isize))?;
        }
        let [gd, gh, gw] = self.grid();
        let [wd, wh, ww] = self.window;
        t.reshape(&[gd, wd, gh, wh, gw, ww, c])?
            .permute(&[0, 2, 4, 1, 3, 5, 6])?
            .reshape(&[self.count(), self.tokens(), c])
    }

    /// Inverse of [`partition`](Self::partition).
    pub fn reverse<'g, T: Scalar>(&self, windows: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = windows.shape();
        if s.len() != 3 || s[0] != self.count() || s[1] != self.tokens() {
            return Err(Error::shape("window_reverse", format!("{s:?} for {} windows", self.count())));
        }
        let c = s[2];
        let [gd, gh, gw] = self.grid();
        let [wd, wh, ww] = self.window;
        let mut t = windows
            .reshape(&[gd, gh, gw, wd, wh, ww, c])?
            .permute(&[0, 3, 1, 4, 2, 5, 6])?
            .reshape(&[self.padded[0], self.padded[1], self.padded[2], c])?;
        for a in 0..3 {
            t = t.roll(a, self.shift[a] as isize)?;
            t = t.narrow(a, 0, self.dims[a])?;
        }
        t.permute(&[3, 0, 1, 2])?
            .reshape(&[1, c, self.dims[0], self.dims[1], self.dims[2]])
    }
}

/// Attention restricted to the windows of `layout`, queries from `q_src`
/// and keys/values from `kv_src` (both `[1, C, D, H, W]`).
pub fn windowed_attention<'g, T: Scalar>(
    attn: &MultiHeadAttention,
    p: &Bound<'g, T>,
    q_src: Var<'g, T>,
    kv_src: Var<'g, T>,
    layout: &Windowing,
) -> Result<Var<'g, T>> {
    if q_src.shape() != kv_src.shape() {
        return Err(Error::shape(
            "windowed_attention",
            format!("{:?} vs {:?}", q_src.shape(), kv_src.shape()),
        ));
    }
    let q = layout.partition(q_src)?;
    let kv = if q_src.id() == kv_src.id() {
        q
    } else {
        layout.partition(kv_src)?
    };
    let mask = layout.needs_mask().then(|| layout.mask::<T>());
    let out = attn.forward(p, q, kv, mask.as_ref())?;
    layout.reverse(out)
}

/// Local 3D window self-attention (shifted when `spec.shift` is non-zero)
/// with a parallel 3x3x3 depth-wise convolution branch.
#[derive(Clone, Debug)]
pub struct L3dMsa {
    pub attn: MultiHeadAttention,
    pub dw: Conv,
    pub spec: WindowSpec,
}

impl L3dMsa {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: MsaConfig, spec: WindowSpec) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut pb, "attn", cfg)?,
            dw: Conv::new(&mut pb, "dw", ConvSpec::depthwise(3, cfg.dim, 3))?,
            spec,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.forward_spec(p, x, self.spec)
    }

    pub fn forward_spec<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, spec: WindowSpec) -> Result<Var<'g, T>> {
        let g = x.graph();
        let _s = g.enter("l3d_msa");
        let s = x.shape();
        let layout = Windowing::new([s[2], s[3], s[4]], spec)?;
        let att = windowed_attention(&self.attn, p, x, x, &layout)?;
        let dw = {
            let _s = g.enter("dw");
            self.dw.forward(p, x)?
        };
        att.add(dw)
    }

    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        let layout = Windowing::new(dims, self.spec)?;
        Ok(self.attn.flops(layout.count(), layout.tokens(), layout.tokens()) + self.dw.flops(1, dims))
    }
}
