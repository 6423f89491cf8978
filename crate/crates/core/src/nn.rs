//! Parameterized layers shared by every part of the network.
//!
//! Layers hold [`ParamId`]s only; the same layer runs in `f32` for training
//! and in `f64` for gradient checks by binding a cast parameter store.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-5;
pub const PROJ_STD: f64 = 0.02;

/// Token-wise affine map over the last axis: `[..., in] -> [..., out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut pb = pb.sub(name);
        let w = pb.create("weight", &[in_dim, out_dim], Init::TruncNormal(PROJ_STD))?;
        let b = if bias {
            Some(pb.create("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape("linear", format!("{shape:?} into {} features", self.in_dim)));
        }
        let rows = x.numel() / self.in_dim;
        let mut y = x.reshape(&[rows, self.in_dim])?.matmul(p[self.w])?;
        if let Some(b) = self.b {
            y = y.add_row(p[b])?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out_dim;
        y.reshape(&out_shape)
    }

    pub fn flops(&self, rows: usize) -> u64 {
        2 * (rows * self.in_dim * self.out_dim) as u64
    }
}

/// 2D or 3D convolution over channel-first input (`[N, C, H, W]` or
/// `[N, C, D, H, W]`).
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
    pub rank: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
    pub rank: usize,
    pub bias: bool,
    pub init: Init,
}

impl ConvSpec {
    /// Square/cubic kernel with "same"-style padding for odd sizes.
    pub fn new(rank: usize, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let lift = |v: usize| if rank == 2 { [1, v, v] } else { [v, v, v] };
        let pad = if k % 2 == 1 { k / 2 } else { 0 };
        let pad = if rank == 2 { [0, pad, pad] } else { [pad, pad, pad] };
        Self {
            cin,
            cout,
            kernel: lift(k),
            stride: lift(stride),
            pad,
            groups: 1,
            rank,
            bias: true,
            init: Init::Kaiming(cin * k.pow(rank as u32)),
        }
    }

    pub fn pointwise(rank: usize, cin: usize, cout: usize) -> Self {
        Self::new(rank, cin, cout, 1, 1)
    }

    pub fn depthwise(rank: usize, channels: usize, k: usize) -> Self {
        Self {
            groups: channels,
            init: Init::Kaiming(k.pow(rank as u32)),
            ..Self::new(rank, channels, channels, k, 1)
        }
    }

    pub fn stride3(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn kernel3(mut self, kernel: [usize; 3], pad: [usize; 3]) -> Self {
        self.kernel = kernel;
        self.pad = pad;
        self
    }

    pub fn init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: ConvSpec) -> Result<Self> {
        let mut pb = pb.sub(name);
        let [kd, kh, kw] = spec.kernel;
        let shape: Vec<usize> = if spec.rank == 2 {
            vec![spec.cout, spec.cin / spec.groups, kh, kw]
        } else {
            vec![spec.cout, spec.cin / spec.groups, kd, kh, kw]
        };
        let w = pb.create("weight", &shape, spec.init)?;
        let b = if spec.bias {
            Some(pb.create("bias", &[spec.cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            cin: spec.cin,
            cout: spec.cout,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
            rank: spec.rank,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = if self.rank == 2 {
            x.conv2d(
                p[self.w],
                [self.stride[1], self.stride[2]],
                [self.pad[1], self.pad[2]],
                self.groups,
            )?
        } else {
            x.conv3d(p[self.w], self.stride, self.pad, self.groups)?
        };
        match self.b {
            Some(b) => y.add_channel(p[b]),
            None => Ok(y),
        }
    }

    /// Output spatial extents for the given input extents (rank 2 uses the
    /// last two entries).
    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [1; 3];
        let first = if self.rank == 2 { 1 } else { 0 };
        for a in first..3 {
            out[a] = (input[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    pub fn flops(&self, n: usize, input: [usize; 3]) -> u64 {
        let out: usize = self.out_dims(input).iter().product();
        let k: usize = if self.rank == 2 {
            self.kernel[1] * self.kernel[2]
        } else {
            self.kernel.iter().product()
        };
        2 * (n * self.cout * out * (self.cin / self.groups) * k) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            gamma: pb.create("gamma", &[dim], Init::Ones)?,
            beta: pb.create("beta", &[dim], Init::Zeros)?,
            dim,
        })
    }

    /// Normalizes over the channel axis of a channel-first feature map.
    pub fn channels<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm_axis(1, p[self.gamma], p[self.beta], LN_EPS)
    }

    pub fn last<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Conv -> LayerNorm (channels) -> GELU.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl ConvNormAct {
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: ConvSpec) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            conv: Conv::new(&mut pb, "conv", spec)?,
            norm: LayerNorm::new(&mut pb, "norm", spec.cout)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv.forward(p, x)?;
        self.norm.channels(p, y)?.gelu()
    }
}

/// Cross Position Feed Forward: a two-layer pointwise MLP where each layer's
/// output is mixed with a depth-wise convolution of itself before GELU.
///
/// `F' = MLP1(F)`, `F'' = MLP2(gelu(F' + CP1(F')))`, `out = gelu(F'' + CP2(F''))`.
#[derive(Clone, Debug)]
pub struct Cpff {
    pub fc1: Conv,
    pub cp1: Conv,
    pub fc2: Conv,
    pub cp2: Conv,
}

impl Cpff {
    pub fn new(pb: &mut ParamBuilder, name: &str, rank: usize, dim: usize, ratio: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        let hidden = dim * ratio.max(1);
        Ok(Self {
            fc1: Conv::new(&mut pb, "fc1", ConvSpec::pointwise(rank, dim, hidden))?,
            cp1: Conv::new(&mut pb, "cp1", ConvSpec::depthwise(rank, hidden, 3))?,
            fc2: Conv::new(&mut pb, "fc2", ConvSpec::pointwise(rank, hidden, dim))?,
            cp2: Conv::new(&mut pb, "cp2", ConvSpec::depthwise(rank, dim, 3))?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let _s = x.graph().enter("cpff");
        let f1 = self.fc1.forward(p, x)?;
        let h = f1.add(self.cp1.forward(p, f1)?)?.gelu()?;
        let f2 = self.fc2.forward(p, h)?;
        f2.add(self.cp2.forward(p, f2)?)?.gelu()
    }

    pub fn flops(&self, n: usize, dims: [usize; 3]) -> u64 {
        self.fc1.flops(n, dims) + self.cp1.flops(n, dims) + self.fc2.flops(n, dims) + self.cp2.flops(n, dims)
    }
}

/// Spatial extents of a channel-first feature map as `[D, H, W]`
/// (`D = 1` for rank-4 maps).
pub fn spatial3(shape: &[usize]) -> [usize; 3] {
    match shape.len() {
        4 => [1, shape[2], shape[3]],
        5 => [shape[2], shape[3], shape[4]],
        _ => [1, 1, 1],
    }
}

/// Resamples the spatial axes of a channel-first map to `target`
/// (`[D, H, W]`; `D` ignored for rank-4 maps). Axes already at size are
/// passed through untouched.
pub fn resize_spatial<'g, T: Scalar>(x: Var<'g, T>, target: [usize; 3], linear: bool) -> Result<Var<'g, T>> {
    let rank = x.shape().len();
    let first = if rank == 4 { 1 } else { 0 };
    let mut y = x;
    for a in first..3 {
        y = y.resample_axis(rank - 3 + a, target[a], linear)?;
    }
    Ok(y)
}

/// Halves every spatial extent (rounding up): right-pad to even, kernel-2
/// stride-2 convolution, channel LayerNorm.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, rank: usize, cin: usize, cout: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            conv: Conv::new(&mut pb, "conv", ConvSpec::new(rank, cin, cout, 2, 2))?,
            norm: LayerNorm::new(&mut pb, "norm", cout)?,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.conv.forward(p, pad_even(x)?)?;
        self.norm.channels(p, y)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = dims.map(|v| v.div_ceil(2));
        if self.conv.rank == 2 {
            out[0] = 1;
        }
        out
    }

    pub fn flops(&self, n: usize, dims: [usize; 3]) -> u64 {
        self.conv.flops(n, dims.map(|v| v.div_ceil(2) * 2))
    }
}

fn pad_even<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let mut y = x;
    for (axis, &len) in s.iter().enumerate().skip(2) {
        y = y.pad(axis, 0, len % 2)?;
    }
    Ok(y)
}
