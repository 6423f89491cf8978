#![allow(dead_code)]

use hresformer::params::ParamBuilder;
use hresformer::{ParamId, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a module into a fresh store with a fixed seed.
pub fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> M) -> (M, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng));
    (m, store)
}

pub fn zero(store: &mut ParamStore<f64>, id: ParamId) {
    let shape = store.get(id).value.shape().to_vec();
    store.get_mut(id).value = Tensor::zeros(shape);
}

pub fn fill(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
    let shape = store.get(id).value.shape().to_vec();
    store.get_mut(id).value = Tensor::full(shape, v);
}

/// `[c, c, 1, ..., 1]` identity pointwise kernel.
pub fn identity_kernel(c: usize, rank: usize) -> Tensor<f64> {
    let mut shape = vec![c, c];
    shape.extend(std::iter::repeat(1).take(rank));
    Tensor::from_fn(shape, |i| if i / c == i % c { 1.0 } else { 0.0 })
}

/// A model small enough to train for a few steps inside a unit test.
pub fn tiny_model() -> hresformer::ModelConfig {
    hresformer::ModelConfig::tiny()
}

pub fn tiny_data() -> hresformer::DataConfig {
    hresformer::DataConfig {
        depth: 4,
        height: 16,
        width: 16,
        n_train: 3,
        n_val: 1,
        n_test: 2,
        ..hresformer::DataConfig::default()
    }
}

pub fn tiny_config() -> hresformer::Config {
    let mut cfg = hresformer::Config {
        model: tiny_model(),
        data: tiny_data(),
        ..hresformer::Config::default()
    };
    cfg.train.epochs = 3;
    cfg
}

/// Train / val / test volumes of `cfg.data`.
pub fn tiny_cases(
    cfg: &hresformer::Config,
) -> (
    Vec<hresformer::phantom::LabeledVolume>,
    Vec<hresformer::phantom::LabeledVolume>,
    Vec<hresformer::phantom::LabeledVolume>,
) {
    use hresformer::phantom::{generate_phantom, make_split, PhantomSpec};
    let d = &cfg.data;
    let spec = PhantomSpec::from_data_config(d, cfg.model.num_classes, 5);
    let s = make_split(d.n_train, d.n_val, d.n_test, 1);
    let gen = |cases: &[hresformer::phantom::CaseRef]| {
        cases
            .iter()
            .map(|c| {
                let mut v = generate_phantom(&spec, c.seed).unwrap();
                v.case_id = c.case_id.clone();
                v
            })
            .collect::<Vec<_>>()
    };
    (gen(&s.train), gen(&s.val), gen(&s.test))
}

/// Naive grouped 3D cross-correlation with explicit bounds checks.
pub fn conv3d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let out: Vec<usize> = (0..3)
        .map(|a| (xs[2 + a] + 2 * pad[a] - ws[2 + a]) / stride[a] + 1)
        .collect();
    Tensor::from_fn([n, cout, out[0], out[1], out[2]], |flat| {
        let ow = flat % out[2];
        let oh = (flat / out[2]) % out[1];
        let od = (flat / (out[2] * out[1])) % out[0];
        let o = (flat / (out[2] * out[1] * out[0])) % cout;
        let b = flat / (out[2] * out[1] * out[0] * cout);
        let grp = o / cout_g;
        let mut acc = 0.0;
        for ci in 0..cin_g {
            for kd in 0..ws[2] {
                for kh in 0..ws[3] {
                    for kw in 0..ws[4] {
                        let id = (od * stride[0] + kd) as isize - pad[0] as isize;
                        let ih = (oh * stride[1] + kh) as isize - pad[1] as isize;
                        let iw = (ow * stride[2] + kw) as isize - pad[2] as isize;
                        if id < 0 || ih < 0 || iw < 0 {
                            continue;
                        }
                        let (id, ih, iw) = (id as usize, ih as usize, iw as usize);
                        if id >= xs[2] || ih >= xs[3] || iw >= xs[4] {
                            continue;
                        }
                        acc += w.at(&[o, ci, kd, kh, kw]) * x.at(&[b, grp * cin_g + ci, id, ih, iw]);
                    }
                }
            }
        }
        acc
    })
}
