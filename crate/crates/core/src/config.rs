//! Model, training, and dataset configuration plus the flat `key = value`
//! file format.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! List values are comma separated (`channels_2d = 16, 32, 64, 128`).
//! Unknown keys are an error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels_2d: [usize; 4],
    pub depths_2d: [usize; 4],
    pub heads_2d: [usize; 4],
    pub reductions_2d: [usize; 4],
    pub channels_3d: [usize; 4],
    /// Blocks per 3D stage; each consecutive pair is an L3D then an SL3D block.
    pub depths_3d: [usize; 4],
    pub heads_3d: [usize; 4],
    /// 3D window edge per axis (D, H, W).
    pub window_3d: [usize; 3],
    pub hlgm_dim: usize,
    pub hlgm_blocks: usize,
    pub hlgm_heads: usize,
    /// LMF region extents (D, H, W).
    pub hlgm_region: [usize; 3],
    /// GMF spatial reduction ratio.
    pub hlgm_reduction: usize,
    pub cpff_ratio: usize,
    /// Block gradients from the 3D branch into the 2D branch.
    pub detach_2d: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 3,
            channels_2d: [16, 32, 64, 128],
            depths_2d: [1, 1, 2, 1],
            heads_2d: [1, 2, 4, 8],
            reductions_2d: [8, 4, 2, 1],
            channels_3d: [16, 32, 64, 128],
            depths_3d: [2, 2, 2, 2],
            heads_3d: [1, 2, 4, 8],
            window_3d: [2, 4, 4],
            hlgm_dim: 16,
            hlgm_blocks: 2,
            hlgm_heads: 2,
            hlgm_region: [2, 4, 4],
            hlgm_reduction: 2,
            cpff_ratio: 4,
            detach_2d: false,
        }
    }
}

impl ModelConfig {
    /// Narrow widths and single heads for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels_2d: [4, 8, 8, 8],
            depths_2d: [1, 1, 1, 1],
            heads_2d: [1, 2, 2, 2],
            reductions_2d: [2, 2, 1, 1],
            channels_3d: [4, 8, 8, 8],
            depths_3d: [2, 2, 2, 2],
            heads_3d: [1, 2, 2, 2],
            window_3d: [2, 4, 4],
            hlgm_dim: 4,
            hlgm_blocks: 1,
            hlgm_heads: 2,
            hlgm_region: [2, 2, 2],
            hlgm_reduction: 2,
            cpff_ratio: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config(detail));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes = {} must be in 2..=255", self.num_classes));
        }
        if self.in_channels == 0 || self.cpff_ratio == 0 {
            return bad("in_channels and cpff_ratio must be positive".into());
        }
        for (name, ch, heads) in [
            ("2d", self.channels_2d, self.heads_2d),
            ("3d", self.channels_3d, self.heads_3d),
        ] {
            if ch.iter().any(|&c| c == 0) || ch.windows(2).any(|w| w[0] > w[1]) {
                return bad(format!("channels_{name} {ch:?} must be positive and non-decreasing"));
            }
            for (c, h) in ch.iter().zip(heads) {
                if h == 0 || c % h != 0 {
                    return bad(format!("channels_{name} {ch:?} not divisible by heads_{name} {heads:?}"));
                }
            }
        }
        if self.channels_2d[0] % 2 != 0 {
            return bad("channels_2d[0] must be even".into());
        }
        if self.depths_3d.iter().any(|d| d % 2 != 0) {
            return bad(format!("depths_3d {:?} must be even (L3D/SL3D pairs)", self.depths_3d));
        }
        if self.reductions_2d.iter().any(|&r| r == 0) || self.hlgm_reduction == 0 {
            return bad("reduction ratios must be >= 1".into());
        }
        if self.window_3d.iter().chain(&self.hlgm_region).any(|&w| w == 0) {
            return bad("window and region extents must be positive".into());
        }
        if self.hlgm_dim == 0 || self.hlgm_dim % 2 != 0 || self.hlgm_heads == 0 || self.hlgm_dim % self.hlgm_heads != 0 {
            return bad(format!(
                "hlgm_dim {} must be even and divisible by hlgm_heads {}",
                self.hlgm_dim, self.hlgm_heads
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Volumes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub seed: u64,
    /// Deep-supervision weights, finest output first; normalized per branch.
    pub ds_weights: [f64; 4],
    /// Stop after this many optimizer steps in total (0 = no limit).
    pub max_steps: usize,
    pub augment: bool,
    pub noise_std: f64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 1,
            lr: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            seed: 0,
            ds_weights: [1.0, 0.5, 0.25, 0.125],
            max_steps: 0,
            augment: true,
            noise_std: 0.1,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.ds_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config(format!("ds_weights {:?} must be positive", self.ds_weights)));
        }
        Ok(())
    }
}

/// Phantom dataset shape and split sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub organs_per_class: usize,
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            depth: 16,
            height: 64,
            width: 64,
            n_train: 20,
            n_val: 5,
            n_test: 5,
            organs_per_class: 1,
            noise: 0.35,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (key, value) in parse_pairs(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "in_channels" => m.in_channels = scalar(key, value)?,
            "num_classes" => m.num_classes = scalar(key, value)?,
            "channels_2d" => m.channels_2d = array(key, value)?,
            "depths_2d" => m.depths_2d = array(key, value)?,
            "heads_2d" => m.heads_2d = array(key, value)?,
            "reductions_2d" => m.reductions_2d = array(key, value)?,
            "channels_3d" => m.channels_3d = array(key, value)?,
            "depths_3d" => m.depths_3d = array(key, value)?,
            "heads_3d" => m.heads_3d = array(key, value)?,
            "window_3d" => m.window_3d = array(key, value)?,
            "hlgm_dim" => m.hlgm_dim = scalar(key, value)?,
            "hlgm_blocks" => m.hlgm_blocks = scalar(key, value)?,
            "hlgm_heads" => m.hlgm_heads = scalar(key, value)?,
            "hlgm_region" => m.hlgm_region = array(key, value)?,
            "hlgm_reduction" => m.hlgm_reduction = scalar(key, value)?,
            "cpff_ratio" => m.cpff_ratio = scalar(key, value)?,
            "detach_2d" => m.detach_2d = scalar(key, value)?,
            "epochs" => t.epochs = scalar(key, value)?,
            "batch_size" => t.batch_size = scalar(key, value)?,
            "lr" => t.lr = scalar(key, value)?,
            "momentum" => t.momentum = scalar(key, value)?,
            "poly_power" => t.poly_power = scalar(key, value)?,
            "seed" => t.seed = scalar(key, value)?,
            "ds_weights" => t.ds_weights = array(key, value)?,
            "max_steps" => t.max_steps = scalar(key, value)?,
            "augment" => t.augment = scalar(key, value)?,
            "noise_std" => t.noise_std = scalar(key, value)?,
            "data_dir" => t.data_dir = PathBuf::from(value),
            "out_dir" => t.out_dir = PathBuf::from(value),
            "depth" => d.depth = scalar(key, value)?,
            "height" => d.height = scalar(key, value)?,
            "width" => d.width = scalar(key, value)?,
            "n_train" => d.n_train = scalar(key, value)?,
            "n_val" => d.n_val = scalar(key, value)?,
            "n_test" => d.n_test = scalar(key, value)?,
            "organs_per_class" => d.organs_per_class = scalar(key, value)?,
            "noise" => d.noise = scalar(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Renders every key in the file format; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("in_channels", m.in_channels.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("channels_2d", list(&m.channels_2d));
        kv("depths_2d", list(&m.depths_2d));
        kv("heads_2d", list(&m.heads_2d));
        kv("reductions_2d", list(&m.reductions_2d));
        kv("channels_3d", list(&m.channels_3d));
        kv("depths_3d", list(&m.depths_3d));
        kv("heads_3d", list(&m.heads_3d));
        kv("window_3d", list(&m.window_3d));
        kv("hlgm_dim", m.hlgm_dim.to_string());
        kv("hlgm_blocks", m.hlgm_blocks.to_string());
        kv("hlgm_heads", m.hlgm_heads.to_string());
        kv("hlgm_region", list(&m.hlgm_region));
        kv("hlgm_reduction", m.hlgm_reduction.to_string());
        kv("cpff_ratio", m.cpff_ratio.to_string());
        kv("detach_2d", m.detach_2d.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("poly_power", t.poly_power.to_string());
        kv("seed", t.seed.to_string());
        kv(
            "ds_weights",
            t.ds_weights.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "),
        );
        kv("max_steps", t.max_steps.to_string());
        kv("augment", t.augment.to_string());
        kv("noise_std", t.noise_std.to_string());
        kv("data_dir", t.data_dir.display().to_string());
        kv("out_dir", t.out_dir.display().to_string());
        kv("depth", d.depth.to_string());
        kv("height", d.height.to_string());
        kv("width", d.width.to_string());
        kv("n_train", d.n_train.to_string());
        kv("n_val", d.n_val.to_string());
        kv("n_test", d.n_test.to_string());
        kv("organs_per_class", d.organs_per_class.to_string());
        kv("noise", d.noise.to_string());
        out
    }
}

/// Splits config text into ordered `(key, value)` pairs. Duplicate keys
/// are rejected.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        if seen.insert(k.to_string(), n + 1).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn scalar<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn array<V: FromStr + Copy + Default, const N: usize>(key: &str, value: &str) -> Result<[V; N]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!("`{key}`: expected {N} values, got {}", parts.len())));
    }
    let mut out = [V::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = scalar(key, p)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut cfg = Config::default();
        cfg.model.hlgm_blocks = 1;
        cfg.train.lr = 0.005;
        cfg.data.noise = 0.25;
        assert_eq!(Config::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# tiny\n\nepochs = 3  # short\nchannels_2d = 8,16, 16 ,32\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.channels_2d, [8, 16, 16, 32]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "epochz = 3",
            "epochs = three",
            "epochs",
            "channels_2d = 1, 2",
            "epochs = 2\nepochs = 3",
            "depths_3d = 1, 2, 2, 2",
            "num_classes = 1",
            "lr = -1",
        ] {
            assert!(matches!(Config::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
