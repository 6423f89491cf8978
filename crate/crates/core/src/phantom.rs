//! Procedural ellipsoid phantoms with exact labels, the HVOL volume file
//! format, dataset splits and the manifest.
//!
//! Randomness is `ChaCha8Rng` seeded with `PhantomSpec::seed`; each case draws
//! from its own stream (`set_stream(case_seed)`), so cases are independent
//! and reproducible across platforms.
//!
//! HVOL layout (little endian): `b"HVOL"`, version `u32`, `D`, `H`, `W`,
//! `K` as `u32`, then `D·H·W` `f32` intensities, then `D·H·W` `u8` labels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HVOL_MAGIC: &[u8; 4] = b"HVOL";
pub const HVOL_VERSION: u32 = 1;
pub const HVOL_HEADER: usize = 24;
pub const MAX_TRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub case_id: String,
    /// `[1, D, H, W]`.
    pub intensity: Tensor<f32>,
    /// `D·H·W` class indices, row-major like `intensity`.
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl LabeledVolume {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.intensity.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.intensity.shape();
        if s.len() != 4 || s[0] != 1 || self.labels.len() != s[1] * s[2] * s[3] {
            return Err(Error::shape(
                "labeled_volume",
                format!("intensity {s:?} with {} labels", self.labels.len()),
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::invalid("labeled_volume", format!("label {l} >= {}", self.num_classes)));
        }
        Ok(())
    }
}

/// One foreground class.
#[derive(Clone, Debug, PartialEq)]
pub struct OrganSpec {
    /// Inclusive range for the number of ellipsoids.
    pub count: (usize, usize),
    /// Inclusive semi-axis range per axis (D, H, W), in voxels.
    pub semi_axes: [(f64, f64); 3],
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Classes `1..K`; class 0 is background.
    pub organs: Vec<OrganSpec>,
    pub background_mean: f64,
    pub background_sigma: f64,
    /// 0 puts every centre at the volume centre; 1 samples it anywhere the
    /// ellipsoid still fits.
    pub jitter: f64,
    pub seed: u64,
}

/// `+1, -1, +2, -2, ...` for classes `1, 2, 3, 4, ...`.
pub fn class_mean(c: usize) -> f64 {
    let m = c.div_ceil(2) as f64;
    if c % 2 == 1 {
        m
    } else {
        -m
    }
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        self.organs.len() + 1
    }

    /// Default phantom family: organs alternate brighter and darker than the
    /// background (class means +1, -1, +2, -2, ...), are flattened along
    /// depth, and share one noise level with the background.
    pub fn from_data_config(d: &DataConfig, num_classes: usize, seed: u64) -> Self {
        let [dd, h, w] = [d.depth as f64, d.height as f64, d.width as f64];
        let organs = (1..num_classes)
            .map(|c| OrganSpec {
                count: (d.organs_per_class, d.organs_per_class),
                semi_axes: [
                    ((dd * 0.15).max(1.0), (dd * 0.3).max(1.0)),
                    ((h * 0.1).max(1.0), (h * 0.2).max(1.0)),
                    ((w * 0.1).max(1.0), (w * 0.2).max(1.0)),
                ],
                mean: class_mean(c),
                sigma: d.noise,
            })
            .collect();
        Self {
            dims: [d.depth, d.height, d.width],
            organs,
            background_mean: 0.0,
            background_sigma: d.noise,
            jitter: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() || self.organs.len() > 254 {
            return Err(Error::Generation(format!("{} foreground classes", self.organs.len())));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Generation(format!("empty extent {:?}", self.dims)));
        }
        for (c, o) in self.organs.iter().enumerate() {
            if o.count.0 > o.count.1 || o.sigma < 0.0 {
                return Err(Error::Generation(format!("class {}: bad count range or sigma", c + 1)));
            }
            for (a, &(lo, hi)) in o.semi_axes.iter().enumerate() {
                if !(lo > 0.0 && lo <= hi && 2.0 * hi <= self.dims[a] as f64) {
                    return Err(Error::Generation(format!(
                        "class {}: semi-axis range ({lo}, {hi}) does not fit extent {}",
                        c + 1,
                        self.dims[a]
                    )));
                }
            }
        }
        if self.background_sigma < 0.0 || !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Generation("bad background sigma or jitter".into()));
        }
        Ok(())
    }

    fn rng(&self, case_seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(case_seed);
        rng
    }
}

/// Axis-aligned ellipsoid in continuous voxel coordinates (voxel `i` covers
/// `[i, i + 1)`, its centre is `i + 0.5`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub centre: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((v[a] as f64 + 0.5 - self.centre[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxels inside the ellipsoid, clipped to `dims`.
    pub fn voxels(&self, dims: [usize; 3]) -> Vec<usize> {
        let range = |a: usize| {
            let lo = (self.centre[a] - self.semi_axes[a] - 0.5).floor().max(0.0) as usize;
            let hi = ((self.centre[a] + self.semi_axes[a] + 0.5).ceil() as usize).min(dims[a]);
            lo..hi
        };
        let mut out = Vec::new();
        for d in range(0) {
            for h in range(1) {
                for w in range(2) {
                    if self.contains([d, h, w]) {
                        out.push((d * dims[1] + h) * dims[2] + w);
                    }
                }
            }
        }
        out
    }
}

/// Draws one labeled volume. Organs are placed class by class by rejection
/// sampling: a candidate touching an already labeled voxel is redrawn.
pub fn generate_phantom(spec: &PhantomSpec, case_seed: u64) -> Result<LabeledVolume> {
    spec.validate()?;
    let mut rng = spec.rng(case_seed);
    let dims = spec.dims;
    let n = dims.iter().product();
    let mut labels = vec![0u8; n];
    for (c, organ) in spec.organs.iter().enumerate() {
        let count = rng.gen_range(organ.count.0..=organ.count.1);
        for k in 0..count {
            let mut placed = false;
            for _ in 0..MAX_TRIES {
                let semi_axes: [f64; 3] = std::array::from_fn(|a| {
                    let (lo, hi) = organ.semi_axes[a];
                    lo + (hi - lo) * rng.gen::<f64>()
                });
                let centre: [f64; 3] = std::array::from_fn(|a| {
                    let mid = dims[a] as f64 / 2.0;
                    let room = mid - semi_axes[a];
                    mid + spec.jitter * room * (2.0 * rng.gen::<f64>() - 1.0)
                });
                let vox = Ellipsoid { centre, semi_axes }.voxels(dims);
                if !vox.is_empty() && vox.iter().all(|&i| labels[i] == 0) {
                    for i in vox {
                        labels[i] = (c + 1) as u8;
                    }
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "case {case_seed}: could not place organ {k} of class {} after {MAX_TRIES} tries",
                    c + 1
                )));
            }
        }
    }
    let mut data = vec![0f32; n];
    for (v, &l) in data.iter_mut().zip(&labels) {
        let (mean, sigma) = match l {
            0 => (spec.background_mean, spec.background_sigma),
            c => (spec.organs[c as usize - 1].mean, spec.organs[c as usize - 1].sigma),
        };
        let noise = if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("sigma checked").sample(&mut rng)
        } else {
            0.0
        };
        *v = (mean + noise) as f32;
    }
    Ok(LabeledVolume {
        case_id: format!("case_{case_seed:03}"),
        intensity: Tensor::new([1, dims[0], dims[1], dims[2]], data)?,
        labels,
        num_classes: spec.num_classes(),
    })
}

pub fn encode_volume(v: &LabeledVolume) -> Result<Vec<u8>> {
    v.validate()?;
    let [d, h, w] = v.dims();
    let mut out = Vec::with_capacity(HVOL_HEADER + 5 * d * h * w);
    out.extend_from_slice(HVOL_MAGIC);
    for x in [HVOL_VERSION, d as u32, h as u32, w as u32, v.num_classes as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for x in v.intensity.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&v.labels);
    Ok(out)
}

/// Parses an HVOL image; `case_id` is not stored in the file.
pub fn decode_volume(bytes: &[u8], case_id: &str) -> Result<LabeledVolume> {
    if bytes.len() < HVOL_HEADER {
        return Err(Error::Format(format!("HVOL truncated: {} byte header", bytes.len())));
    }
    if &bytes[..4] != HVOL_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != HVOL_VERSION {
        return Err(Error::Format(format!("unsupported HVOL version {}", word(0))));
    }
    let (d, h, w, k) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
    let n = d
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let want = HVOL_HEADER + 5 * n;
    if bytes.len() != want {
        return Err(Error::Format(format!("HVOL size {} bytes, expected {want}", bytes.len())));
    }
    let body = &bytes[HVOL_HEADER..];
    let data: Vec<f32> = body[..4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = body[4 * n..].to_vec();
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Format(format!("label {l} >= class count {k}")));
    }
    Ok(LabeledVolume {
        case_id: case_id.to_string(),
        intensity: Tensor::new([1, d, h, w], data)?,
        labels,
        num_classes: k,
    })
}

pub fn save_volume(path: &Path, v: &LabeledVolume) -> Result<()> {
    fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<LabeledVolume> {
    let case_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("case");
    decode_volume(&fs::read(path)?, case_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseRef {
    pub case_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<CaseRef>,
    pub val: Vec<CaseRef>,
    pub test: Vec<CaseRef>,
}

impl Split {
    pub fn get(&self, kind: SplitKind) -> &[CaseRef] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

/// Case `i` uses stream `i` of `PhantomSpec::seed`; `seed` shuffles the cases
/// into the three splits.
pub fn make_split(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Split {
    let mut cases: Vec<CaseRef> = (0..(n_train + n_val + n_test) as u64)
        .map(|i| CaseRef {
            case_id: format!("case_{i:03}"),
            seed: i,
        })
        .collect();
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = cases.split_off(n_train + n_val);
    let val = cases.split_off(n_train);
    Split { train: cases, val, test }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: SplitKind,
}

pub const MANIFEST: &str = "manifest.txt";

/// Generates every case of `split` into `dir` and writes `dir/manifest.txt`.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, split: &Split) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
        for case in split.get(kind) {
            let mut vol = generate_phantom(spec, case.seed)?;
            vol.case_id = case.case_id.clone();
            let path = PathBuf::from(format!("{}.hvol", case.case_id));
            save_volume(&dir.join(&path), &vol)?;
            entries.push(ManifestEntry {
                case_id: case.case_id.clone(),
                path,
                split: kind,
            });
        }
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(render_manifest(&entries).as_bytes())?;
    Ok(entries)
}

pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{} {} {}\n", e.case_id, e.path.display(), e.split.as_str()))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [id, path, split] = parts[..] else {
            return Err(Error::Format(format!("manifest line {}: expected `case_id path split`", n + 1)));
        };
        out.push(ManifestEntry {
            case_id: id.to_string(),
            path: PathBuf::from(path),
            split: SplitKind::parse(split)?,
        });
    }
    Ok(out)
}

/// Loaded cases of one split, in manifest order.
pub fn load_split(dir: &Path, kind: SplitKind) -> Result<Vec<LabeledVolume>> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Format(format!("cannot read manifest in {}: {e}", dir.display())))?;
    parse_manifest(&text)?
        .into_iter()
        .filter(|e| e.split == kind)
        .map(|e| {
            let mut v = load_volume(&dir.join(&e.path))?;
            v.case_id = e.case_id;
            Ok(v)
        })
        .collect()
}

/// Zero mean, unit variance over the whole volume (variance floored).
pub fn normalize(x: &Tensor<f32>) -> Tensor<f32> {
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.max(1e-12).sqrt();
    x.map(|v| ((v as f64 - mean) * inv) as f32)
}

/// Random flips of each spatial axis (probability ½) applied to intensity
/// and labels alike, then additive Gaussian intensity noise.
pub fn augment(v: &LabeledVolume, noise_std: f64, rng: &mut ChaCha8Rng) -> LabeledVolume {
    let [d, h, w] = v.dims();
    let flip: [bool; 3] = std::array::from_fn(|_| rng.gen::<bool>());
    let src = |i: usize, n: usize, f: bool| if f { n - 1 - i } else { i };
    let mut data = vec![0f32; d * h * w];
    let mut labels = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let s = (src(z, d, flip[0]) * h + src(y, h, flip[1])) * w + src(x, w, flip[2]);
                let t = (z * h + y) * w + x;
                data[t] = v.intensity.data()[s];
                labels[t] = v.labels[s];
            }
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("positive std");
        for x in &mut data {
            *x += normal.sample(rng) as f32;
        }
    }
    LabeledVolume {
        case_id: v.case_id.clone(),
        intensity: Tensor::new([1, d, h, w], data).expect("same shape"),
        labels,
        num_classes: v.num_classes,
    }
}
