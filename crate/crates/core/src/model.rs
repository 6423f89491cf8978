//! The full hybrid network: slice-wise 2D predictions, HLGM fusion with the
//! raw volume, the 3D branch, and residual addition of the 2D prediction to
//! every 3D output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone2d::{predict_volume_2d, Backbone2d};
use crate::backbone3d::Backbone3d;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hlgm::Hlgm;
use crate::nn::resize_spatial;
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct HResFormer {
    pub cfg: ModelConfig,
    pub net2d: Backbone2d,
    pub hlgm: Hlgm,
    pub net3d: Backbone3d,
}

/// All supervised outputs, each `[K, d, h, w]`, finest first.
/// `p3d_res[i] = resize(p2d[0]) + p3d[i]`.
pub struct Pyramid<'g, T: Scalar> {
    pub p2d: Vec<Var<'g, T>>,
    pub p3d: Vec<Var<'g, T>>,
    pub p3d_res: Vec<Var<'g, T>>,
}

/// Hard labels of one volume from the hybrid output and from the 2D
/// branch alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<u8>,
    pub labels_2d: Vec<u8>,
}

impl HResFormer {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let model = Self {
            cfg: cfg.clone(),
            net2d: Backbone2d::new(&mut pb, "net2d", cfg)?,
            hlgm: Hlgm::new(&mut pb, "hlgm", cfg)?,
            net3d: Backbone3d::new(&mut pb, "net3d", cfg)?,
        };
        Ok((model, store))
    }

    /// `vol: [C_in, D, H, W]`.
    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, vol: Var<'g, T>) -> Result<Pyramid<'g, T>> {
        let s = vol.shape();
        if s.len() != 4 || s[0] != self.cfg.in_channels {
            return Err(Error::shape(
                "forward",
                format!("expected [{}, D, H, W], got {s:?}", self.cfg.in_channels),
            ));
        }
        let full = [s[1], s[2], s[3]];
        let p2d = predict_volume_2d(&self.net2d, p, vol)?;
        let p2d0 = if self.cfg.detach_2d { p2d[0].detach() } else { p2d[0] };
        let f0 = self.hlgm.forward(p, p2d0, vol)?;
        let heads = self.net3d.forward(p, f0)?;
        let k = self.cfg.num_classes;
        let mut p3d = Vec::with_capacity(heads.len());
        for (i, h) in heads.into_iter().enumerate() {
            let hs = h.shape();
            let y = h.reshape(&[k, hs[2], hs[3], hs[4]])?;
            p3d.push(if i == 0 { resize_spatial_kdhw(y, full)? } else { y });
        }
        let p3d_res = p3d
            .iter()
            .map(|&y| {
                let ys = y.shape();
                resize_spatial_kdhw(p2d0, [ys[1], ys[2], ys[3]])?.add(y)
            })
            .collect::<Result<_>>()?;
        Ok(Pyramid { p2d, p3d, p3d_res })
    }

    /// Argmax of `P'_3d,0` (and of `P_2d,0`), lowest class on ties.
    pub fn segment(&self, store: &ParamStore<f32>, vol: &Tensor<f32>) -> Result<Segmentation> {
        let g = Graph::inference();
        let p = store.bind(&g);
        let pyr = self.forward(&p, g.constant(vol.clone()))?;
        Ok(Segmentation {
            labels: argmax_classes(&pyr.p3d_res[0].value()),
            labels_2d: argmax_classes(&pyr.p2d[0].value()),
        })
    }

    pub fn infer(&self, store: &ParamStore<f32>, vol: &Tensor<f32>) -> Result<Vec<u8>> {
        Ok(self.segment(store, vol)?.labels)
    }

    /// Closed-form FLOPs of one forward pass on a `[C_in, D, H, W]` volume.
    pub fn flops(&self, dims: [usize; 3]) -> Result<u64> {
        let [d, h, w] = dims;
        let e = self.hlgm.out_dims(dims);
        Ok(self.net2d.flops(d, h, w) + self.hlgm.flops(dims)? + self.net3d.flops(e)?)
    }

    /// FLOPs measured by running a zero volume through an inference graph.
    pub fn measured_flops(&self, store: &ParamStore<f32>, dims: [usize; 3]) -> Result<(u64, Vec<crate::graph::FlopRecord>)> {
        let g = Graph::<f32>::inference();
        let p = store.bind(&g);
        let vol = Tensor::zeros([self.cfg.in_channels, dims[0], dims[1], dims[2]]);
        self.forward(&p, g.constant(vol))?;
        Ok((g.total_flops(), g.flop_records()))
    }
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

/// Resamples the spatial axes of `[K, D, H, W]` (linear).
pub fn resize_spatial_kdhw<'g, T: Scalar>(x: Var<'g, T>, target: [usize; 3]) -> Result<Var<'g, T>> {
    let s = x.shape();
    let y = resize_spatial(x.reshape(&[1, s[0], s[1], s[2], s[3]])?, target, true)?;
    y.reshape(&[s[0], target[0], target[1], target[2]])
}

/// Per-voxel argmax over the leading class axis; ties go to the lowest
/// class index.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let vox = logits.numel() / k;
    let d = logits.data();
    (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if d[c * vox + v] > d[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
