//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three views: phantom slices with a label overlay, the 3D window layout
//! (and shift mask) seen by one query voxel, and GR-MSA attention of one
//! query token over the reduced key grid.

use hresformer::attention::{tokens_2d, GrMsa, MsaConfig, WindowSpec, Windowing};
use hresformer::backbone2d::PatchEmbed2d;
use hresformer::checkpoint::Checkpoint;
use hresformer::nn::LayerNorm;
use hresformer::params::ParamBuilder;
use hresformer::phantom::{generate_phantom, normalize, LabeledVolume, PhantomSpec};
use hresformer::{DataConfig, Error, Graph, HResFormer, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const CLASS_RGB: [[u8; 3]; 6] = [[0, 0, 0], [230, 70, 60], [60, 200, 90], [70, 120, 240], [240, 200, 50], [200, 80, 220]];

fn js(e: hresformer::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Phantom {
    vol: LabeledVolume,
}

impl Phantom {
    pub fn generate(seed: u32, case: u32, depth: usize, height: usize, width: usize) -> Result<Self> {
        let data = DataConfig {
            depth,
            height,
            width,
            ..DataConfig::default()
        };
        let spec = PhantomSpec::from_data_config(&data, 3, seed as u64);
        Ok(Self {
            vol: generate_phantom(&spec, case as u64)?,
        })
    }

    pub fn volume(&self) -> &LabeledVolume {
        &self.vol
    }

    /// Intensities of slice `z` as `[1, 1, H, W]`, z-scored over the volume.
    pub fn slice_input(&self, z: usize) -> Tensor<f32> {
        let [_, h, w] = self.vol.dims();
        let all = normalize(&self.vol.intensity);
        let start = z * h * w;
        Tensor::new([1, 1, h, w], all.data()[start..start + h * w].to_vec()).expect("slice shape")
    }
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, case: u32, depth: usize, height: usize, width: usize) -> std::result::Result<Phantom, JsError> {
        Self::generate(seed, case, depth, height, width).map_err(js)
    }

    pub fn depth(&self) -> usize {
        self.vol.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.vol.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.vol.dims()[2]
    }

    /// RGBA pixels of slice `z`: grey intensity (−3..3 mapped to black..white)
    /// with an optional translucent label colour.
    pub fn slice_rgba(&self, z: usize, overlay: bool) -> Vec<u8> {
        let [d, h, w] = self.vol.dims();
        let z = z.min(d - 1);
        let n = h * w;
        let data = self.vol.intensity.data();
        let mut out = Vec::with_capacity(4 * n);
        for i in z * n..(z + 1) * n {
            let g = ((data[i] as f64 + 3.0) / 6.0 * 255.0).clamp(0.0, 255.0);
            let label = self.vol.labels[i] as usize;
            let mut px = [g; 3];
            if overlay && label > 0 {
                let c = CLASS_RGB[label % CLASS_RGB.len()];
                for k in 0..3 {
                    px[k] = 0.45 * g + 0.55 * c[k] as f64;
                }
            }
            out.extend(px.iter().map(|v| v.round() as u8));
            out.push(255);
        }
        out
    }
}

/// Window id of every voxel of slice `z` followed by a 0/1 visibility flag
/// per voxel for the query at `(z, qy, qx)`: visible voxels share the
/// query's window and are not masked by the cyclic shift. Length `2·H·W`.
pub fn window_layout(dims: [usize; 3], window: [usize; 3], shifted: bool, query: [usize; 3]) -> Result<Vec<i32>> {
    let spec = if shifted {
        WindowSpec::shifted(window)
    } else {
        WindowSpec::new(window)
    };
    let l = Windowing::new(dims, spec)?;
    let [_, h, w] = dims;
    let n = l.tokens();
    let sources = l.token_sources();
    let mask: Tensor<f32> = l.mask();
    let mut ids = vec![-1i32; h * w];
    let mut visible = vec![0i32; h * w];
    let mut home = None;
    for (t, src) in sources.iter().enumerate() {
        if let Some(s) = src {
            if s[0] == query[0] {
                ids[s[1] * w + s[2]] = (t / n) as i32;
            }
            if *s == query {
                home = Some(t);
            }
        }
    }
    let home = home.ok_or_else(|| Error::Invalid {
        op: "window_layout",
        detail: format!("query {query:?} outside {dims:?}"),
    })?;
    let (win, i) = (home / n, home % n);
    for j in 0..n {
        if let Some(s) = sources[win * n + j] {
            if s[0] == query[0] && mask.data()[(win * n + i) * n + j] == 0.0 {
                visible[s[1] * w + s[2]] = 1;
            }
        }
    }
    ids.extend(visible);
    Ok(ids)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn window_view(
    depth: usize,
    height: usize,
    width: usize,
    wd: usize,
    wh: usize,
    ww: usize,
    shifted: bool,
    z: usize,
    qy: usize,
    qx: usize,
) -> std::result::Result<Vec<i32>, JsError> {
    window_layout([depth, height, width], [wd, wh, ww], shifted, [z, qy, qx]).map_err(js)
}

/// Patch embedding plus one GR-MSA layer, either freshly drawn or lifted
/// from the first 2D stage of a trained checkpoint.
#[wasm_bindgen]
pub struct AttentionDemo {
    embed: PatchEmbed2d,
    norm: LayerNorm,
    attn: GrMsa,
    store: ParamStore<f32>,
}

impl AttentionDemo {
    /// Random weights with query/key projections widened to ±`spread` so
    /// the maps follow image content instead of staying near-uniform.
    pub fn random(seed: u64, r: usize, spread: f32) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let embed = PatchEmbed2d::new(&mut pb, "embed", 1, 16)?;
        let norm = LayerNorm::new(&mut pb, "norm", 16)?;
        let attn = GrMsa::new(&mut pb, "attn", MsaConfig::new(16, 2)?, r)?;
        for p in store.iter_mut().filter(|p| p.name.starts_with("attn.attn.q.") || p.name.starts_with("attn.attn.k.")) {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-spread..spread);
            }
        }
        Ok(Self { embed, norm, attn, store })
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::decode(bytes)?;
        let (model, fresh) = HResFormer::new(&ck.config.model, 0)?;
        ck.check_compatible(&fresh)?;
        let block = model.net2d.stages[0][0].clone();
        Ok(Self {
            embed: model.net2d.embed,
            norm: block.norm1,
            attn: block.attn,
            store: ck.params,
        })
    }

    /// Head-averaged attention of token `(ty, tx)` over the reduced keys,
    /// with the token and key grid extents.
    pub fn weights(&self, input: &Tensor<f32>, ty: usize, tx: usize) -> Result<(Vec<f32>, [usize; 2], [usize; 2])> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let x = self.embed.forward(&p, g.constant(input.clone()))?;
        let x = self.norm.channels(&p, x)?;
        let s = x.shape();
        let (th, tw) = (s[2], s[3]);
        if ty >= th || tx >= tw {
            return Err(Error::Invalid {
                op: "attention",
                detail: format!("token ({ty}, {tx}) outside {th}x{tw}"),
            });
        }
        let kv = self.attn.reduce(&p, x)?;
        let ks = kv.shape();
        let (_, probs) = self.attn.attn.forward_with_probs(&p, tokens_2d(x)?, tokens_2d(kv)?, None)?;
        let probs = probs.value();
        let (heads, lq, lk) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
        let q = ty * tw + tx;
        let mut out = vec![0.0f32; lk];
        for hd in 0..heads {
            let row = &probs.data()[(hd * lq + q) * lk..(hd * lq + q + 1) * lk];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / heads as f32;
            }
        }
        Ok((out, [th, tw], [ks[2], ks[3]]))
    }
}

#[wasm_bindgen]
impl AttentionDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, r: usize) -> std::result::Result<AttentionDemo, JsError> {
        Self::random(seed as u64, r, 0.5).map_err(js)
    }

    /// Uses the patch embedding and first GR block of an HRFM checkpoint.
    pub fn load(bytes: &[u8]) -> std::result::Result<AttentionDemo, JsError> {
        Self::from_checkpoint_bytes(bytes).map_err(js)
    }

    pub fn reduction(&self) -> usize {
        self.attn.r
    }

    /// `[token_h, token_w, key_h, key_w, weights...]`.
    pub fn map(&self, phantom: &Phantom, z: usize, ty: usize, tx: usize) -> std::result::Result<Vec<f32>, JsError> {
        let z = z.min(phantom.depth() - 1);
        let (w, t, k) = self.weights(&phantom.slice_input(z), ty, tx).map_err(js)?;
        let mut out = vec![t[0] as f32, t[1] as f32, k[0] as f32, k[1] as f32];
        out.extend(w);
        Ok(out)
    }
}
